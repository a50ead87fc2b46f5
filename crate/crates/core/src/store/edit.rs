//! Offline edit transforms applied to stored caches.

use std::collections::HashMap;

use serde::Deserialize;

use crate::model::KvCache;

use super::StoreError;

/// A transform over a decompressed cache. Parameters arrive as JSON so the
/// registry stays open to transforms with arbitrary shapes.
pub trait KvTransform: Send + Sync {
    fn name(&self) -> &str;
    fn apply(&self, cache: &mut KvCache, params: &serde_json::Value) -> Result<(), StoreError>;
}

/// Built-in transform 1: multiply the stored V rows of selected tokens by a
/// factor, in every layer and head.
pub struct ScaleValueRows;

pub const SCALE_VALUE_ROWS: u32 = 1;

#[derive(Debug, Deserialize)]
struct ScaleParams {
    tokens: Vec<usize>,
    factor: f32,
}

impl KvTransform for ScaleValueRows {
    fn name(&self) -> &str {
        "scale_value_rows"
    }

    fn apply(&self, cache: &mut KvCache, params: &serde_json::Value) -> Result<(), StoreError> {
        let p: ScaleParams = serde_json::from_value(params.clone())
            .map_err(|e| StoreError::InvalidEditParams(e.to_string()))?;
        if !p.factor.is_finite() {
            return Err(StoreError::InvalidEditParams(format!(
                "factor must be finite, got {}",
                p.factor
            )));
        }
        if let Some(&bad) = p.tokens.iter().find(|&&t| t >= cache.n_tokens()) {
            return Err(StoreError::InvalidEditParams(format!(
                "token index {bad} out of range for {} tokens",
                cache.n_tokens()
            )));
        }
        let g = cache.geometry();
        for l in 0..g.n_layers {
            for h in 0..g.n_heads {
                for &t in &p.tokens {
                    for x in cache.v_row_mut(l, h, t) {
                        *x *= p.factor;
                    }
                }
            }
        }
        Ok(())
    }
}

pub struct TransformRegistry {
    transforms: HashMap<u32, Box<dyn KvTransform>>,
}

impl Default for TransformRegistry {
    fn default() -> Self {
        let mut r = Self {
            transforms: HashMap::new(),
        };
        r.register(SCALE_VALUE_ROWS, Box::new(ScaleValueRows));
        r
    }
}

impl TransformRegistry {
    /// Registers `t` under `id`, returning any transform it replaces.
    pub fn register(&mut self, id: u32, t: Box<dyn KvTransform>) -> Option<Box<dyn KvTransform>> {
        self.transforms.insert(id, t)
    }

    pub fn get(&self, id: u32) -> Option<&dyn KvTransform> {
        self.transforms.get(&id).map(|b| b.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Geometry;
    use serde_json::json;

    fn cache() -> KvCache {
        let g = Geometry {
            n_layers: 1,
            n_heads: 2,
            d_head: 2,
        };
        KvCache::from_parts(g, 3, 0, vec![1.0; 12], (0..12).map(|i| i as f32).collect()).unwrap()
    }

    #[test]
    fn scales_selected_rows_only() {
        let mut c = cache();
        ScaleValueRows
            .apply(&mut c, &json!({"tokens": [1], "factor": 2.0}))
            .unwrap();
        assert_eq!(c.v_row(0, 0, 0), &[0.0, 1.0]);
        assert_eq!(c.v_row(0, 0, 1), &[4.0, 6.0]);
        assert_eq!(c.v_row(0, 1, 1), &[16.0, 18.0]);
        assert_eq!(c.k(), &[1.0; 12]);
    }

    #[test]
    fn rejects_bad_params() {
        let mut c = cache();
        assert!(ScaleValueRows
            .apply(&mut c, &json!({"tokens": [3], "factor": 1.0}))
            .is_err());
        assert!(ScaleValueRows.apply(&mut c, &json!({"factor": 1.0})).is_err());
    }

    #[test]
    fn registry_has_builtin() {
        let r = TransformRegistry::default();
        assert_eq!(r.get(SCALE_VALUE_ROWS).unwrap().name(), "scale_value_rows");
        assert!(r.get(99).is_none());
    }
}
