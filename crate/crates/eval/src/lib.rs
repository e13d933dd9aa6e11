//! Holds the `acceptance` test target (`cargo test -p fastfill-eval --test acceptance`).
//! The library itself is empty.
