//! Small neural-network layer kit on top of candle: seeded parameter
//! stores, convolution/linear layers, differentiable bilinear resize and
//! versioned checkpoint files.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::Value;

use crate::error::{contract, Error, Result};
use crate::image::bilinear_taps;

/// Current on-disk checkpoint format.
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const META_KEY: &str = "__meta__";

/// How a freshly created parameter is initialized.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    /// Zero-mean Gaussian with the given standard deviation.
    Normal(f64),
}

/// Anything that can hand out named parameters of a given shape.
pub trait ParamSource {
    fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor>;
}

/// Trainable parameters, created deterministically from a seed.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: device.clone(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    /// All variables in name order.
    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn vars_excluding(&self, prefix: &str) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(k, _)| !k.starts_with(prefix))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.vars.iter().map(|(k, v)| (k.clone(), v.as_tensor().clone())).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites every variable with the tensor of the same name.
    pub fn assign(&self, values: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let t = values
                .get(name)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, model expects {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

impl ParamSource for ParamStore {
    fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(contract(format!("parameter {name} declared twice")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                (0..n).map(|_| dist.sample(&mut self.rng)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }
}

/// Read-only parameters loaded from a checkpoint; never tracked for gradients.
pub struct FrozenParams {
    tensors: HashMap<String, Tensor>,
    dtype: DType,
}

impl FrozenParams {
    pub fn new(tensors: HashMap<String, Tensor>, dtype: DType) -> Self {
        Self { tensors, dtype }
    }
}

impl ParamSource for FrozenParams {
    fn param(&mut self, name: &str, shape: &[usize], _init: Init) -> Result<Tensor> {
        let t = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name}")))?;
        if t.dims() != shape {
            return Err(Error::Format(format!(
                "tensor {name} has shape {:?}, model expects {shape:?}",
                t.dims()
            )));
        }
        Ok(t.to_dtype(self.dtype)?.detach())
    }
}

fn kaiming(fan_in: usize) -> Init {
    Init::Normal((2.0 / fan_in as f64).sqrt())
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        ps: &mut dyn ParamSource,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        Self::scaled(ps, name, in_ch, out_ch, kernel, stride, padding, 1.0)
    }

    /// Like [`Conv2d::new`] with the He-normal std multiplied by `gain`.
    /// Residual branches use a small gain so activations stay O(1) without
    /// normalization layers.
    #[allow(clippy::too_many_arguments)]
    pub fn scaled(
        ps: &mut dyn ParamSource,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        gain: f64,
    ) -> Result<Self> {
        let std = (2.0 / (in_ch * kernel * kernel) as f64).sqrt() * gain;
        let weight = ps.param(&format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], Init::Normal(std))?;
        let bias = ps.param(&format!("{name}.bias"), &[out_ch], Init::Zeros)?;
        Ok(Self { weight, bias, stride, padding })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let out_ch = self.bias.dim(0)?;
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, out_ch, 1, 1))?)?)
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }
}

/// Transposed convolution, 4x4 kernel, stride 2, padding 1: exactly doubles H and W.
#[derive(Debug, Clone)]
pub struct Upsample2x {
    weight: Tensor,
    bias: Tensor,
}

impl Upsample2x {
    pub fn new(ps: &mut dyn ParamSource, name: &str, in_ch: usize, out_ch: usize) -> Result<Self> {
        let weight = ps.param(
            &format!("{name}.weight"),
            &[in_ch, out_ch, 4, 4],
            // each output pixel sees in_ch * (4*4)/(2*2) taps
            kaiming(in_ch * 4),
        )?;
        let bias = ps.param(&format!("{name}.bias"), &[out_ch], Init::Zeros)?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let out_ch = self.bias.dim(0)?;
        let y = x.conv_transpose2d(&self.weight, 1, 0, 2, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, out_ch, 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(ps: &mut dyn ParamSource, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = ps.param(
            &format!("{name}.weight"),
            &[out_dim, in_dim],
            Init::Normal((1.0 / in_dim as f64).sqrt()),
        )?;
        let bias = ps.param(&format!("{name}.bias"), &[out_dim], Init::Zeros)?;
        Ok(Self { weight, bias })
    }

    /// `(N, in) -> (N, out)`
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// `(out_len, in_len)` bilinear interpolation matrix with half-pixel centers.
pub fn resize_matrix(in_len: usize, out_len: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut m = vec![0f64; out_len * in_len];
    for (o, (i0, i1, t)) in bilinear_taps(in_len, out_len).into_iter().enumerate() {
        m[o * in_len + i0] += 1.0 - t;
        m[o * in_len + i1] += t;
    }
    Ok(Tensor::from_vec(m, (out_len, in_len), device)?.to_dtype(dtype)?)
}

/// Differentiable bilinear resize over the last two dimensions of any tensor of rank >= 2.
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let dims = x.dims();
    if dims.len() < 2 {
        return Err(contract("bilinear_resize needs at least two dimensions"));
    }
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let ry = resize_matrix(h, out_h, x.dtype(), x.device())?;
    let rx_t = resize_matrix(w, out_w, x.dtype(), x.device())?.t()?;
    let y = x.broadcast_matmul(&rx_t)?;
    Ok(ry.broadcast_matmul(&y)?)
}

/// Numerically stable softmax over the last dimension.
pub fn softmax_last(logits: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(logits, D::Minus1)?)
}

/// Writes a single-file checkpoint: named tensors plus an embedded JSON
/// metadata record carrying `format_version`. The write goes through a
/// temporary file and a rename so a crash never leaves a torn checkpoint.
pub fn save_checkpoint(path: &Path, tensors: &[(String, Tensor)], meta: &Value) -> Result<()> {
    let mut meta = meta.clone();
    if let Value::Object(map) = &mut meta {
        map.insert("format_version".into(), Value::from(CHECKPOINT_FORMAT_VERSION));
    } else {
        return Err(contract("checkpoint metadata must be a JSON object"));
    }
    let meta_bytes = serde_json::to_vec(&meta)?;
    let n = meta_bytes.len();
    let mut map: HashMap<String, Tensor> = tensors
        .iter()
        .map(|(k, t)| Ok((k.clone(), t.to_device(&Device::Cpu)?)))
        .collect::<Result<_>>()?;
    map.insert(META_KEY.to_string(), Tensor::from_vec(meta_bytes, n, &Device::Cpu)?);
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("tmp");
    candle_core::safetensors::save(&map, &tmp)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Loads a checkpoint written by [`save_checkpoint`], validating the format version.
pub fn load_checkpoint(path: &Path, device: &Device) -> Result<(HashMap<String, Tensor>, Value)> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.to_path_buf()));
    }
    let mut map = candle_core::safetensors::load(path, device)?;
    let meta = map
        .remove(META_KEY)
        .ok_or_else(|| Error::Format(format!("{} has no metadata record", path.display())))?;
    let meta: Value = serde_json::from_slice(&meta.to_vec1::<u8>()?)?;
    let version = meta.get("format_version").and_then(Value::as_u64);
    if version != Some(CHECKPOINT_FORMAT_VERSION as u64) {
        return Err(Error::Format(format!(
            "{}: unsupported checkpoint format version {version:?}",
            path.display()
        )));
    }
    Ok((map, meta))
}

/// Bitwise digest-free comparison helper: flattens a tensor to f64 values.
pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_matrix_rows_sum_to_one() {
        let m = resize_matrix(5, 11, DType::F64, &Device::Cpu).unwrap();
        let sums = m.sum(1).unwrap().to_vec1::<f64>().unwrap();
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-12));
    }

    #[test]
    fn bilinear_resize_matches_host_resize() {
        let data: Vec<f32> = (0..12).map(|i| (i * 7 % 5) as f32 / 4.0).collect();
        let mask = crate::image::Mask::new(3, 4, data).unwrap();
        let host = mask.resize(7, 9);
        let t = mask.to_tensor(DType::F64, &Device::Cpu).unwrap();
        let dev = bilinear_resize(&t, 7, 9).unwrap();
        let dev = to_f64_vec(&dev).unwrap();
        for (a, b) in host.data().iter().zip(dev) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
    }

    #[test]
    fn param_store_is_seed_deterministic() {
        let dev = Device::Cpu;
        let mut a = ParamStore::new(3, DType::F32, &dev);
        let mut b = ParamStore::new(3, DType::F32, &dev);
        let ta = a.param("w", &[4, 4], Init::Normal(1.0)).unwrap();
        let tb = b.param("w", &[4, 4], Init::Normal(1.0)).unwrap();
        assert_eq!(to_f64_vec(&ta).unwrap(), to_f64_vec(&tb).unwrap());
        assert!(a.param("w", &[1], Init::Zeros).is_err());
    }

    #[test]
    fn upsample_doubles_resolution() {
        let dev = Device::Cpu;
        let mut ps = ParamStore::new(0, DType::F32, &dev);
        let up = Upsample2x::new(&mut ps, "up", 4, 2).unwrap();
        let x = Tensor::ones((1, 4, 3, 5), DType::F32, &dev).unwrap();
        assert_eq!(up.forward(&x).unwrap().dims(), &[1, 2, 6, 10]);
    }

    #[test]
    fn checkpoint_round_trip_and_version_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let t = Tensor::new(&[1.5f32, -2.0], &Device::Cpu).unwrap();
        save_checkpoint(&path, &[("a".into(), t)], &serde_json::json!({"kind": "test"})).unwrap();
        let (map, meta) = load_checkpoint(&path, &Device::Cpu).unwrap();
        assert_eq!(map["a"].to_vec1::<f32>().unwrap(), vec![1.5, -2.0]);
        assert_eq!(meta["kind"], "test");
        assert!(matches!(
            load_checkpoint(&dir.path().join("missing"), &Device::Cpu),
            Err(Error::MissingCheckpoint(_))
        ));
    }
}
