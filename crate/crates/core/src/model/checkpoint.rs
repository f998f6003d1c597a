//! Binary checkpoint layout (little-endian, no padding):
//!
//! ```text
//! "WMK1" | u32 layer_count
//! per layer: u32 out_dim | u32 in_dim | u32 activation (0 identity, 1 relu)
//!            | out_dim*in_dim f32 weights (row-major) | out_dim f32 biases
//! ```

use super::{Linear, MlpModel};
use crate::codec::{put_f32s_le, put_u32_le, Reader};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"WMK1";

const ACT_IDENTITY: u32 = 0;
const ACT_RELU: u32 = 1;

pub fn save_checkpoint(model: &MlpModel) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * (model.param_count() + 3 * model.layers.len()));
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32_le(&mut out, model.layers.len() as u32);
    let last = model.layers.len() - 1;
    for (i, l) in model.layers.iter().enumerate() {
        put_u32_le(&mut out, l.out_dim as u32);
        put_u32_le(&mut out, l.in_dim as u32);
        put_u32_le(&mut out, if i == last { ACT_IDENTITY } else { ACT_RELU });
        put_f32s_le(&mut out, &l.weights);
        put_f32s_le(&mut out, &l.bias);
    }
    out
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<MlpModel> {
    let mut r = Reader::new(bytes);
    r.expect_magic(CHECKPOINT_MAGIC)?;
    let at = r.offset();
    let count = r.u32_le("layer count")? as usize;
    if count == 0 {
        return Err(Error::format(at, "layer count is zero"));
    }
    let mut layers: Vec<Linear> = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let at = r.offset();
        let out_dim = r.u32_le("out_dim")? as usize;
        let in_dim = r.u32_le("in_dim")? as usize;
        if out_dim == 0 || in_dim == 0 {
            return Err(Error::format(at, format!("layer {i} has a zero dimension")));
        }
        if let Some(prev) = layers.last() {
            if prev.out_dim != in_dim {
                return Err(Error::format(
                    at,
                    format!("layer {i} expects {in_dim} inputs but layer {} emits {}", i - 1, prev.out_dim),
                ));
            }
        }
        let act_at = r.offset();
        let act = r.u32_le("activation")?;
        let want = if i + 1 == count { ACT_IDENTITY } else { ACT_RELU };
        if act != want {
            return Err(Error::format(act_at, format!("layer {i} has activation tag {act}, expected {want}")));
        }
        let w_at = r.offset();
        let weights = r.f32_vec_le(out_dim * in_dim, "weights")?;
        let bias = r.f32_vec_le(out_dim, "biases")?;
        let layer = Linear::new(out_dim, in_dim, weights, bias).map_err(|e| Error::format(w_at, e.to_string()))?;
        layers.push(layer);
    }
    r.finish()?;
    MlpModel::from_layers(layers)
}
