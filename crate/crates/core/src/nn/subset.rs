//! Width subsetting: carve a narrower submodel out of a full model by
//! index sets over the embedding width and the FFN hidden width, and
//! write trained sub-tensors back to the same coordinates.
//!
//! Slicing is positional on raw parameter coordinates. The fused QKV
//! projection is sliced per section so queries, keys and values each
//! keep the same width indices; vocabulary and context dimensions are
//! never scaled.

use crate::error::{Error, Result};
use crate::nn::model::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Index sets defining a width-subset of a full model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubsetSpec {
    pub full_d: usize,
    pub full_fh: usize,
    pub d_indices: Vec<usize>,
    pub fh_indices: Vec<usize>,
}

impl SubsetSpec {
    /// Leading-index subset (static width scaling): the first `sub_d`
    /// embedding dims and first `sub_fh` hidden dims.
    pub fn leading(full_d: usize, full_fh: usize, sub_d: usize, sub_fh: usize) -> Result<Self> {
        SubsetSpec::new(
            full_d,
            full_fh,
            (0..sub_d).collect(),
            (0..sub_fh).collect(),
        )
    }

    /// Wrapping-window subset (rolling width scaling): `sub_d` indices
    /// starting at `start_d` modulo the full width, and likewise for the
    /// hidden dimension. Indices are kept in ascending order so the
    /// extracted submodel is a plain coordinate projection.
    pub fn window(
        full_d: usize,
        full_fh: usize,
        sub_d: usize,
        sub_fh: usize,
        start_d: usize,
        start_fh: usize,
    ) -> Result<Self> {
        let mut d: Vec<usize> = (0..sub_d).map(|k| (start_d + k) % full_d).collect();
        let mut fh: Vec<usize> = (0..sub_fh).map(|k| (start_fh + k) % full_fh).collect();
        d.sort_unstable();
        fh.sort_unstable();
        SubsetSpec::new(full_d, full_fh, d, fh)
    }

    pub fn new(
        full_d: usize,
        full_fh: usize,
        d_indices: Vec<usize>,
        fh_indices: Vec<usize>,
    ) -> Result<Self> {
        let spec = SubsetSpec {
            full_d,
            full_fh,
            d_indices,
            fh_indices,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        for (label, idx, full) in [
            ("width", &self.d_indices, self.full_d),
            ("hidden", &self.fh_indices, self.full_fh),
        ] {
            if idx.is_empty() {
                return Err(Error::config(format!("empty {label} index set")));
            }
            let mut prev = None;
            for &i in idx {
                if i >= full {
                    return Err(Error::shape(format!(
                        "{label} index {i} out of bounds for size {full}"
                    )));
                }
                if prev == Some(i) || prev.is_some_and(|p| p > i) {
                    return Err(Error::config(format!(
                        "{label} indices must be strictly ascending"
                    )));
                }
                prev = Some(i);
            }
        }
        Ok(())
    }

    pub fn sub_d(&self) -> usize {
        self.d_indices.len()
    }

    pub fn sub_fh(&self) -> usize {
        self.fh_indices.len()
    }

    /// Row/column index sets for the named tensor, or `None` for an axis
    /// that is not sliced (kept whole).
    #[allow(clippy::type_complexity)]
    fn axes(&self, name: &str) -> Result<(Option<&[usize]>, Option<&[usize]>, bool)> {
        let d: &[usize] = &self.d_indices;
        let fh: &[usize] = &self.fh_indices;
        // (rows, cols, qkv-sectioned-cols)
        let leaf = name.rsplit('.').next().unwrap_or(name);
        let module = {
            let mut parts = name.rsplit('.');
            parts.next();
            parts.next().unwrap_or("")
        };
        let spec = match (module, leaf) {
            (_, "tok") | (_, "pos") => (None, Some(d), false),
            ("qkv", "w") => (Some(d), Some(d), true),
            ("qkv", "b") => (None, Some(d), true),
            ("attn_out", "w") => (Some(d), Some(d), false),
            ("attn_out", "b") => (None, Some(d), false),
            ("ffn_in", "w") => (Some(d), Some(fh), false),
            ("ffn_in", "b") => (None, Some(fh), false),
            ("ffn_out", "w") => (Some(fh), Some(d), false),
            ("ffn_out", "b") => (None, Some(d), false),
            ("ln1", _) | ("ln2", _) | ("ln", _) => (None, Some(d), false),
            ("out", "w") => (Some(d), None, false),
            ("out", "b") => (None, None, false),
            _ => {
                return Err(Error::shape(format!(
                    "no subset rule for parameter tensor {name}"
                )))
            }
        };
        Ok(spec)
    }

    /// Flat full-tensor index for every scalar of the sub-tensor, in
    /// sub-tensor order. `shape` is the FULL tensor's shape.
    pub fn flat_map(&self, name: &str, shape: &[usize]) -> Result<Vec<usize>> {
        let (row_idx, col_idx, sectioned) = self.axes(name)?;
        let (rows, cols) = match shape {
            [c] => (1usize, *c),
            [r, c] => (*r, *c),
            _ => return Err(Error::shape(format!("tensor {name} has unsupported rank"))),
        };
        let row_ids: Vec<usize> = match row_idx {
            Some(idx) => idx.to_vec(),
            None => (0..rows).collect(),
        };
        let col_ids: Vec<usize> = match col_idx {
            Some(idx) => {
                if sectioned {
                    // Q, K and V sections each carry the same width
                    // indices at offsets 0, D and 2D.
                    let section = cols / 3;
                    let mut ids = Vec::with_capacity(3 * idx.len());
                    for s in 0..3 {
                        ids.extend(idx.iter().map(|&i| s * section + i));
                    }
                    ids
                } else {
                    idx.to_vec()
                }
            }
            None => (0..cols).collect(),
        };
        for &r in &row_ids {
            if r >= rows {
                return Err(Error::shape(format!(
                    "row index {r} out of bounds for {name} with {rows} rows"
                )));
            }
        }
        for &c in &col_ids {
            if c >= cols {
                return Err(Error::shape(format!(
                    "column index {c} out of bounds for {name} with {cols} columns"
                )));
            }
        }
        let mut map = Vec::with_capacity(row_ids.len() * col_ids.len());
        for &r in &row_ids {
            for &c in &col_ids {
                map.push(r * cols + c);
            }
        }
        Ok(map)
    }

    /// Shape of the sub-tensor corresponding to the named full tensor.
    pub fn sub_shape(&self, name: &str, shape: &[usize]) -> Result<Vec<usize>> {
        let (row_idx, col_idx, sectioned) = self.axes(name)?;
        let mut out = shape.to_vec();
        match shape.len() {
            1 => {
                if let Some(idx) = col_idx {
                    out[0] = if sectioned { 3 * idx.len() } else { idx.len() };
                }
            }
            2 => {
                if let Some(idx) = row_idx {
                    out[0] = idx.len();
                }
                if let Some(idx) = col_idx {
                    out[1] = if sectioned { 3 * idx.len() } else { idx.len() };
                }
            }
            _ => return Err(Error::shape(format!("tensor {name} has unsupported rank"))),
        }
        Ok(out)
    }
}

/// Extracts the sub-tensors for every parameter in `full`.
pub fn subset_extract<S: Scalar>(
    full: &ParamStore<S>,
    spec: &SubsetSpec,
) -> Result<ParamStore<S>> {
    let mut out = ParamStore::new();
    for (name, tensor) in full.iter() {
        let map = spec.flat_map(name, tensor.shape())?;
        let shape = spec.sub_shape(name, tensor.shape())?;
        let data: Vec<S> = map.iter().map(|&i| tensor.data()[i]).collect();
        out.insert(name.clone(), Tensor::new(shape, data));
    }
    Ok(out)
}

/// Writes each sub-tensor's scalars back to their source coordinates in
/// `full`. Missing names in `sub` are left untouched.
pub fn subset_embed<S: Scalar>(
    sub: &ParamStore<S>,
    full: &mut ParamStore<S>,
    spec: &SubsetSpec,
) -> Result<()> {
    for (name, small) in sub.iter() {
        let target = full
            .try_get(name)
            .ok_or_else(|| Error::shape(format!("unknown tensor {name} in full model")))?;
        let map = spec.flat_map(name, target.shape())?;
        if map.len() != small.len() {
            return Err(Error::shape(format!(
                "sub tensor {name} has {} scalars, subset expects {}",
                small.len(),
                map.len()
            )));
        }
        let small_data = small.data().to_vec();
        let target = full.get_mut(name);
        for (k, &i) in map.iter().enumerate() {
            target.data_mut()[i] = small_data[k];
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_store() -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.insert(
            "layer0.attn_out.w",
            Tensor::new(vec![4, 4], (0..16).map(|v| v as f64).collect()),
        );
        p.insert(
            "layer0.qkv.w",
            Tensor::new(vec![4, 12], (0..48).map(|v| v as f64).collect()),
        );
        p.insert(
            "layer0.ln1.g",
            Tensor::new(vec![4], vec![10.0, 11.0, 12.0, 13.0]),
        );
        p.insert(
            "head.out.w",
            Tensor::new(vec![4, 5], (0..20).map(|v| v as f64).collect()),
        );
        p
    }

    #[test]
    fn full_width_extract_is_identity() {
        let full = toy_store();
        let spec = SubsetSpec::leading(4, 8, 4, 8).unwrap();
        let sub = subset_extract(&full, &spec).unwrap();
        for (name, t) in full.iter() {
            assert_eq!(sub.get(name), t, "{name}");
        }
    }

    #[test]
    fn leading_block_slice_matches_hand_pick() {
        let full = toy_store();
        let spec = SubsetSpec::leading(4, 8, 2, 4).unwrap();
        let sub = subset_extract(&full, &spec).unwrap();
        // attn_out.w rows/cols {0,1} → top-left 2×2 block of
        // [[0..4],[4..8],...] = [[0,1],[4,5]].
        assert_eq!(sub.get("layer0.attn_out.w").data(), &[0.0, 1.0, 4.0, 5.0]);
        // qkv.w cols are width indices {0,1} inside each of the three
        // 4-wide sections: {0,1, 4,5, 8,9} of rows {0,1}.
        assert_eq!(
            sub.get("layer0.qkv.w").data(),
            &[0.0, 1.0, 4.0, 5.0, 8.0, 9.0, 12.0, 13.0, 16.0, 17.0, 20.0, 21.0]
        );
        assert_eq!(sub.get("layer0.ln1.g").data(), &[10.0, 11.0]);
        // Head keeps the whole vocabulary axis.
        assert_eq!(sub.get("head.out.w").shape(), &[2, 5]);
    }

    #[test]
    #[allow(clippy::identity_op)]
    fn extract_embed_extract_is_idempotent() {
        let full = toy_store();
        let spec = SubsetSpec::window(4, 8, 2, 4, 3, 6).unwrap();
        let sub = subset_extract(&full, &spec).unwrap();
        let mut modified = sub.clone();
        for (_, t) in modified.iter_mut() {
            for v in t.data_mut() {
                *v += 100.0;
            }
        }
        let mut full2 = full.clone();
        subset_embed(&modified, &mut full2, &spec).unwrap();
        let roundtrip = subset_extract(&full2, &spec).unwrap();
        for (name, t) in modified.iter() {
            assert_eq!(roundtrip.get(name), t, "{name}");
        }
        // Coordinates outside the subset are untouched.
        let outside = full2.get("layer0.attn_out.w").data()[1 * 4 + 1];
        assert_eq!(outside, full.get("layer0.attn_out.w").data()[1 * 4 + 1]);
    }

    #[test]
    fn window_wraps_and_sorts() {
        let spec = SubsetSpec::window(4, 8, 2, 2, 3, 7).unwrap();
        assert_eq!(spec.d_indices, vec![0, 3]);
        assert_eq!(spec.fh_indices, vec![0, 7]);
    }

    #[test]
    fn out_of_bounds_index_rejected() {
        assert!(SubsetSpec::new(4, 8, vec![0, 4], vec![0]).is_err());
        assert!(SubsetSpec::new(4, 8, vec![1, 1], vec![0]).is_err());
        assert!(SubsetSpec::new(4, 8, vec![], vec![0]).is_err());
    }
}
