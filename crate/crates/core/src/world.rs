//! Seeded synthetic old/new embedders.
//!
//! Every item has a latent point `z = c_y + w` (class centroid plus
//! within-class noise). The new embedder maps `z` through a fixed map with
//! orthonormal columns and adds a little noise. The old embedder maps a
//! degraded copy of `z` through a different fixed map and adds more noise:
//! for classes it does not "know" the centroid component is removed, so those
//! classes collapse onto each other in old feature space. Optional subgroup
//! multipliers scale the old noise per class group.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureSet, PairedFeatureSet, SetRole};

fn default_within_class_sigma() -> f64 {
    0.6
}

/// Class-to-subgroup assignment with per-subgroup old-noise multipliers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubgroupSpec {
    /// Subgroup tag of every class, indexed by label.
    pub class_subgroups: Vec<u32>,
    /// Old-embedder noise multiplier, indexed by subgroup tag.
    pub old_noise_multipliers: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticWorldConfig {
    pub num_classes: usize,
    pub dim: usize,
    pub latent_dim: usize,
    pub train_per_class: usize,
    pub gallery_per_class: usize,
    pub query_per_class: usize,
    #[serde(default = "default_within_class_sigma")]
    pub within_class_sigma: f64,
    pub old_noise_sigma: f64,
    pub new_noise_sigma: f64,
    pub old_class_fraction: f64,
    #[serde(default)]
    pub subgroup_spec: Option<SubgroupSpec>,
    /// Replaced by a derived per-run seed in experiments.
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticWorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "need at least 2 classes"));
        }
        if self.dim == 0 {
            return Err(Error::config("dim", "must be positive"));
        }
        if self.latent_dim == 0 || self.latent_dim > self.dim {
            return Err(Error::config("latent_dim", "must be in 1..=dim"));
        }
        for (field, count) in [
            ("train_per_class", self.train_per_class),
            ("gallery_per_class", self.gallery_per_class),
            ("query_per_class", self.query_per_class),
        ] {
            if count == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        for (field, v) in [
            ("within_class_sigma", self.within_class_sigma),
            ("old_noise_sigma", self.old_noise_sigma),
            ("new_noise_sigma", self.new_noise_sigma),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(field, "must be a finite nonnegative number"));
            }
        }
        if self.new_noise_sigma > self.old_noise_sigma {
            return Err(Error::config(
                "new_noise_sigma",
                "the new embedder must not be noisier than the old one",
            ));
        }
        if !(self.old_class_fraction > 0.0 && self.old_class_fraction <= 1.0) {
            return Err(Error::config("old_class_fraction", "must be in (0, 1]"));
        }
        if let Some(spec) = &self.subgroup_spec {
            if spec.class_subgroups.len() != self.num_classes {
                return Err(Error::config(
                    "subgroup_spec.class_subgroups",
                    format!("expected {} entries", self.num_classes),
                ));
            }
            if let Some(&bad) = spec
                .class_subgroups
                .iter()
                .find(|&&g| g as usize >= spec.old_noise_multipliers.len())
            {
                return Err(Error::config(
                    "subgroup_spec.class_subgroups",
                    format!("subgroup {bad} has no noise multiplier"),
                ));
            }
            if spec
                .old_noise_multipliers
                .iter()
                .any(|m| !m.is_finite() || *m < 0.0)
            {
                return Err(Error::config(
                    "subgroup_spec.old_noise_multipliers",
                    "must be finite and nonnegative",
                ));
            }
        }
        Ok(())
    }

    /// Classes `0..known_classes()` keep their discriminative component in
    /// the old embedder; the rest are collapsed.
    pub fn known_classes(&self) -> usize {
        ((self.old_class_fraction * self.num_classes as f64).ceil() as usize)
            .clamp(1, self.num_classes)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub train: PairedFeatureSet,
    pub gallery: PairedFeatureSet,
    pub query: PairedFeatureSet,
}

/// Columns of a `rows × cols` Gaussian matrix, orthonormalised (modified Gram-Schmidt).
fn random_orthonormal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    loop {
        let mut m = Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng));
        let mut ok = true;
        for j in 0..cols {
            for p in 0..j {
                let proj: f64 = m.column(j).dot(&m.column(p));
                let prev = m.column(p).to_owned();
                m.column_mut(j).scaled_add(-proj, &prev);
            }
            let norm = m.column(j).dot(&m.column(j)).sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            m.column_mut(j).mapv_inplace(|v| v / norm);
        }
        if ok {
            return m;
        }
    }
}

struct Embedders {
    centroids: Array2<f64>,
    new_map: Array2<f64>,
    old_map: Array2<f64>,
}

fn split(
    cfg: &SyntheticWorldConfig,
    emb: &Embedders,
    per_class: usize,
    first_id: u64,
    role: SetRole,
    rng: &mut ChaCha8Rng,
) -> Result<PairedFeatureSet> {
    let (k, d, l) = (cfg.num_classes, cfg.dim, cfg.latent_dim);
    let known = cfg.known_classes();
    let n = k * per_class;
    let mut ids = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut subgroups = cfg.subgroup_spec.as_ref().map(|_| Vec::with_capacity(n));
    let mut old_data = Vec::with_capacity(n * d);
    let mut new_data = Vec::with_capacity(n * d);

    let mut latent = Array1::<f64>::zeros(l);
    let mut old_latent = Array1::<f64>::zeros(l);
    for class in 0..k {
        let centroid = emb.centroids.row(class);
        let noise_mult = match &cfg.subgroup_spec {
            Some(spec) => spec.old_noise_multipliers[spec.class_subgroups[class] as usize],
            None => 1.0,
        };
        for _ in 0..per_class {
            for j in 0..l {
                let w: f64 = StandardNormal.sample(rng);
                latent[j] = centroid[j] + cfg.within_class_sigma * w;
                old_latent[j] = if class < known {
                    latent[j]
                } else {
                    latent[j] - centroid[j]
                };
            }
            let new_vec = emb.new_map.dot(&latent);
            let old_vec = emb.old_map.dot(&old_latent);
            for j in 0..d {
                let e: f64 = StandardNormal.sample(rng);
                new_data.push((new_vec[j] + cfg.new_noise_sigma * e) as f32);
            }
            for j in 0..d {
                let e: f64 = StandardNormal.sample(rng);
                old_data.push((old_vec[j] + cfg.old_noise_sigma * noise_mult * e) as f32);
            }
            ids.push(first_id + ids.len() as u64);
            labels.push(class as u32);
            if let (Some(sg), Some(spec)) = (subgroups.as_mut(), &cfg.subgroup_spec) {
                sg.push(spec.class_subgroups[class]);
            }
        }
    }
    let old = FeatureSet::new(
        d,
        role,
        ids.clone(),
        labels.clone(),
        subgroups.clone(),
        old_data,
    )?;
    let new = FeatureSet::new(d, role, ids, labels, subgroups, new_data)?;
    PairedFeatureSet::new(old, new)
}

/// Generates train, gallery and query pairs. Identical configs give
/// bit-identical worlds.
pub fn generate_world(cfg: &SyntheticWorldConfig) -> Result<World> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centroids = Array2::from_shape_fn((cfg.num_classes, cfg.latent_dim), |_| {
        StandardNormal.sample(&mut rng)
    });
    let new_map = random_orthonormal(cfg.dim, cfg.latent_dim, &mut rng);
    // A different basis with per-direction gains, still full column rank.
    let mut old_map = random_orthonormal(cfg.dim, cfg.latent_dim, &mut rng);
    let gain = Uniform::new(0.5, 1.5).expect("valid range");
    for mut col in old_map.columns_mut() {
        let g: f64 = gain.sample(&mut rng);
        col.mapv_inplace(|v| v * g);
    }
    let emb = Embedders {
        centroids,
        new_map,
        old_map,
    };

    let n_train = (cfg.num_classes * cfg.train_per_class) as u64;
    let n_gallery = (cfg.num_classes * cfg.gallery_per_class) as u64;
    let train = split(cfg, &emb, cfg.train_per_class, 0, SetRole::Train, &mut rng)?;
    let gallery = split(
        cfg,
        &emb,
        cfg.gallery_per_class,
        n_train,
        SetRole::Gallery,
        &mut rng,
    )?;
    let query = split(
        cfg,
        &emb,
        cfg.query_per_class,
        n_train + n_gallery,
        SetRole::Query,
        &mut rng,
    )?;
    Ok(World {
        train,
        gallery,
        query,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::encode_feature_set;

    pub(crate) fn small_cfg() -> SyntheticWorldConfig {
        SyntheticWorldConfig {
            num_classes: 5,
            dim: 8,
            latent_dim: 4,
            train_per_class: 6,
            gallery_per_class: 4,
            query_per_class: 2,
            within_class_sigma: 0.5,
            old_noise_sigma: 0.3,
            new_noise_sigma: 0.1,
            old_class_fraction: 0.6,
            subgroup_spec: None,
            seed: 11,
        }
    }

    #[test]
    fn shapes_and_alignment() {
        let w = generate_world(&small_cfg()).unwrap();
        assert_eq!(w.train.len(), 30);
        assert_eq!(w.gallery.len(), 20);
        assert_eq!(w.query.len(), 10);
        assert_eq!(w.gallery.old.role(), SetRole::Gallery);
        assert_eq!(w.gallery.old.ids()[0], 30);
        assert_eq!(w.query.new.ids()[9], 59);
        for p in [&w.train, &w.gallery, &w.query] {
            p.validate().unwrap();
        }
    }

    #[test]
    fn deterministic_bytes() {
        let a = generate_world(&small_cfg()).unwrap();
        let b = generate_world(&small_cfg()).unwrap();
        assert_eq!(
            encode_feature_set(&a.gallery.old),
            encode_feature_set(&b.gallery.old)
        );
        assert_eq!(
            encode_feature_set(&a.train.new),
            encode_feature_set(&b.train.new)
        );
        let mut other = small_cfg();
        other.seed = 12;
        assert_ne!(generate_world(&other).unwrap().train.new, a.train.new);
    }

    #[test]
    fn noiseless_features_are_linear_images_of_each_other() {
        let mut cfg = small_cfg();
        cfg.old_noise_sigma = 0.0;
        cfg.new_noise_sigma = 0.0;
        cfg.old_class_fraction = 1.0;
        cfg.latent_dim = cfg.dim;
        let w = generate_world(&cfg).unwrap();
        // Fit old -> new by least squares on the train split and check the
        // residual on the gallery is at f32 rounding level.
        let x = w.train.old.to_matrix();
        let y = w.train.new.to_matrix();
        let map = least_squares(&x, &y);
        let pred = w.gallery.old.to_matrix().dot(&map);
        let err = (&pred - &w.gallery.new.to_matrix())
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-4, "max residual {err}");
    }

    /// Minimum-norm solution of `x * m = y` via ridge-regularised normal equations.
    fn least_squares(x: &Array2<f64>, y: &Array2<f64>) -> Array2<f64> {
        let d = x.ncols();
        let mut a = x.t().dot(x);
        for i in 0..d {
            a[[i, i]] += 1e-9;
        }
        let mut b = x.t().dot(y);
        // Gauss-Jordan with partial pivoting.
        for c in 0..d {
            let p = (c..d)
                .max_by(|&i, &j| a[[i, c]].abs().total_cmp(&a[[j, c]].abs()))
                .unwrap();
            for j in 0..d {
                a.swap([c, j], [p, j]);
            }
            for j in 0..b.ncols() {
                b.swap([c, j], [p, j]);
            }
            let piv = a[[c, c]];
            for r in 0..d {
                if r == c {
                    continue;
                }
                let f = a[[r, c]] / piv;
                for j in 0..d {
                    a[[r, j]] -= f * a[[c, j]];
                }
                for j in 0..b.ncols() {
                    b[[r, j]] -= f * b[[c, j]];
                }
            }
        }
        for r in 0..d {
            let piv = a[[r, r]];
            b.row_mut(r).mapv_inplace(|v| v / piv);
        }
        b
    }

    #[test]
    fn collapsed_classes_lose_their_centroid() {
        let mut cfg = small_cfg();
        cfg.old_noise_sigma = 0.0;
        cfg.new_noise_sigma = 0.0;
        cfg.within_class_sigma = 0.0;
        cfg.old_class_fraction = 0.2;
        let w = generate_world(&cfg).unwrap();
        // Every unknown-class item sits at the origin in old space.
        for i in 0..w.train.len() {
            let label = w.train.old.labels()[i];
            let norm: f32 = w.train.old.row(i).iter().map(|v| v * v).sum();
            if label >= 1 {
                assert!(norm < 1e-10);
            } else {
                assert!(norm > 1e-3);
            }
        }
    }

    #[test]
    fn invalid_fields_are_named() {
        let mut cfg = small_cfg();
        cfg.new_noise_sigma = 1.0;
        let err = generate_world(&cfg).unwrap_err().to_string();
        assert!(err.contains("new_noise_sigma"), "{err}");

        let mut cfg = small_cfg();
        cfg.old_class_fraction = 0.0;
        assert!(generate_world(&cfg)
            .unwrap_err()
            .to_string()
            .contains("old_class_fraction"));

        let mut cfg = small_cfg();
        cfg.subgroup_spec = Some(SubgroupSpec {
            class_subgroups: vec![0, 1, 1, 1, 2],
            old_noise_multipliers: vec![2.0, 1.0],
        });
        assert!(generate_world(&cfg)
            .unwrap_err()
            .to_string()
            .contains("class_subgroups"));
    }

    #[test]
    fn subgroup_tags_follow_classes() {
        let mut cfg = small_cfg();
        cfg.subgroup_spec = Some(SubgroupSpec {
            class_subgroups: vec![0, 1, 1, 1, 1],
            old_noise_multipliers: vec![2.0, 1.0],
        });
        let w = generate_world(&cfg).unwrap();
        let q = &w.query.new;
        for i in 0..q.len() {
            let expect = if q.labels()[i] == 0 { 0 } else { 1 };
            assert_eq!(q.subgroups().unwrap()[i], expect);
        }
    }
}
