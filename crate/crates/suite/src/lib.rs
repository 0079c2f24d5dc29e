//! Holds the `acceptance` test target; run it with `cargo test -p hoi-suite`.
//! Set `HOI_TRAIN_COUNTS` to a JSON array of per-HOI training counts to check the rare split.
