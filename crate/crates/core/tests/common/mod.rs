//! Proptest strategies shared by integration tests.

use okp_core::feature_io::FeatureMap;
use proptest::prelude::*;

/// `rows × cols × d` map with values in `[-2, 2)`.
pub fn feature_map(
    rows: impl Strategy<Value = usize>,
    cols: impl Strategy<Value = usize>,
    d: impl Strategy<Value = usize>,
) -> impl Strategy<Value = FeatureMap> {
    (rows, cols, d).prop_flat_map(|(r, c, d)| {
        prop::collection::vec(-2.0f32..2.0, r * c * d)
            .prop_map(move |data| FeatureMap::from_grid(r, c, d, data).unwrap())
    })
}
