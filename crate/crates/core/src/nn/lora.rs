//! Rank-nesting utilities for heterogeneous adapters.
//!
//! The server holds adapters at the maximum configured rank Z; a client
//! assigned rank z trains the nested slice made of the first z adapter
//! columns (down-projection) and rows (up-projection). These helpers cut
//! that slice out of a full store and enumerate which coordinates of the
//! full-rank adapters a given client rank covers.

use crate::error::{Error, Result};
use crate::nn::model::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub fn is_lora_down(name: &str) -> bool {
    name.ends_with(".lora_down")
}

pub fn is_lora_up(name: &str) -> bool {
    name.ends_with(".lora_up")
}

/// Copy of `full` with every adapter pair cut down to rank `z`
/// (down-projections keep their first `z` columns, up-projections their
/// first `z` rows). All other tensors are copied unchanged.
pub fn slice_rank<S: Scalar>(full: &ParamStore<S>, z: usize) -> Result<ParamStore<S>> {
    let mut out = ParamStore::new();
    for (name, tensor) in full.iter() {
        if is_lora_down(name) {
            let (p, cap) = (tensor.rows(), tensor.cols());
            if z > cap {
                return Err(Error::config(format!(
                    "rank {z} exceeds adapter capacity {cap} for {name}"
                )));
            }
            let mut data = Vec::with_capacity(p * z);
            for r in 0..p {
                data.extend_from_slice(&tensor.data()[r * cap..r * cap + z]);
            }
            out.insert(name.clone(), Tensor::new(vec![p, z], data));
        } else if is_lora_up(name) {
            let (cap, q) = (tensor.rows(), tensor.cols());
            if z > cap {
                return Err(Error::config(format!(
                    "rank {z} exceeds adapter capacity {cap} for {name}"
                )));
            }
            out.insert(
                name.clone(),
                Tensor::new(vec![z, q], tensor.data()[..z * q].to_vec()),
            );
        } else {
            out.insert(name.clone(), tensor.clone());
        }
    }
    Ok(out)
}

/// Flat coordinates of the FULL-rank tensor `name` (with `full_shape`)
/// that a rank-`z` client trains, in the client sub-tensor's own scalar
/// order.
pub fn rank_slice_map(name: &str, full_shape: &[usize], z: usize) -> Result<Vec<usize>> {
    if is_lora_down(name) {
        let (p, cap) = (full_shape[0], full_shape[1]);
        if z > cap {
            return Err(Error::shape(format!("rank {z} exceeds capacity {cap}")));
        }
        let mut map = Vec::with_capacity(p * z);
        for r in 0..p {
            for c in 0..z {
                map.push(r * cap + c);
            }
        }
        Ok(map)
    } else if is_lora_up(name) {
        let q = full_shape[1];
        Ok((0..z * q).collect())
    } else {
        Ok((0..full_shape.iter().product()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nested_slices_share_leading_coordinates() {
        let mut full = ParamStore::new();
        full.insert(
            "layer0.qkv.lora_down",
            Tensor::new(vec![3, 4], (0..12).map(|v| v as f64).collect()),
        );
        full.insert(
            "layer0.qkv.lora_up",
            Tensor::new(vec![4, 2], (0..8).map(|v| v as f64).collect()),
        );
        full.insert("layer0.ln1.g", Tensor::new(vec![3], vec![9.0, 9.0, 9.0]));

        let sliced = slice_rank(&full, 2).unwrap();
        assert_eq!(
            sliced.get("layer0.qkv.lora_down").data(),
            &[0.0, 1.0, 4.0, 5.0, 8.0, 9.0]
        );
        assert_eq!(
            sliced.get("layer0.qkv.lora_up").data(),
            &[0.0, 1.0, 2.0, 3.0]
        );
        assert_eq!(sliced.get("layer0.ln1.g").data(), &[9.0, 9.0, 9.0]);
    }

    #[test]
    fn slice_map_matches_slice_values() {
        let t = Tensor::new(vec![3, 4], (0..12).map(|v| v as f64).collect());
        let map = rank_slice_map("x.lora_down", t.shape(), 2).unwrap();
        let picked: Vec<f64> = map.iter().map(|&i| t.data()[i]).collect();
        assert_eq!(picked, vec![0.0, 1.0, 4.0, 5.0, 8.0, 9.0]);
    }

    #[test]
    fn oversized_rank_rejected() {
        let mut full = ParamStore::new();
        full.insert("a.lora_up", Tensor::<f64>::zeros(vec![2, 3]));
        assert!(slice_rank(&full, 3).is_err());
    }
}
