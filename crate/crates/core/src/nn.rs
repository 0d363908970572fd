//! Parameter store and the small set of layers the networks are built from.
//!
//! 3D convolutions (dense and sparse) are written as gather + matmul over a
//! precomputed neighbor table whose out-of-range entries point at one
//! appended all-zero row.

use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;

use candle_core::{DType, Device, Tensor, Var, D};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Optimizer group a parameter belongs to, decided by its name prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Backbone,
    Other,
}

pub const BACKBONE_PREFIX: &str = "backbone.";

impl ParamGroup {
    pub fn of(name: &str) -> Self {
        if name.starts_with(BACKBONE_PREFIX) {
            Self::Backbone
        } else {
            Self::Other
        }
    }
}

/// Named trainable parameters, iterated in name order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites every parameter from `values`; names and shapes must match exactly.
    pub fn load(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        if values.len() != self.vars.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                values.len(),
                self.vars.len()
            )));
        }
        for (name, var) in &self.vars {
            let v = values
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if v.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    v.dims(),
                    var.dims()
                )));
            }
            var.set(&v.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }
}

/// Creates parameters with seeded initialization and records them in a [`ParamStore`].
pub struct ParamBuilder {
    store: ParamStore,
    rng: SeededRng,
    dtype: DType,
    prefix: Vec<String>,
}

impl ParamBuilder {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self { store: ParamStore::default(), rng: SeededRng::new(seed), dtype, prefix: Vec::new() }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn push(&mut self, name: &str) {
        self.prefix.push(name.to_string());
    }

    pub fn pop(&mut self) {
        self.prefix.pop();
    }

    fn full_name(&self, name: &str) -> String {
        let mut s = self.prefix.join(".");
        if !s.is_empty() {
            s.push('.');
        }
        s.push_str(name);
        s
    }

    fn insert(&mut self, name: &str, data: Vec<f64>, shape: &[usize]) -> Result<Var> {
        let full = self.full_name(name);
        if self.store.vars.contains_key(&full) {
            return Err(Error::invalid(format!("duplicate parameter `{full}`")));
        }
        let t = Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.store.vars.insert(full, var.clone());
        Ok(var)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Var> {
        let n = shape.iter().product();
        let data = self.rng.normals(n).into_iter().map(|x| x * std).collect();
        self.insert(name, data, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let n = shape.iter().product();
        self.insert(name, vec![value; n], shape)
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, input: usize, output: usize) -> Result<Self> {
        Self::with_gain(pb, name, input, output, 1.0)
    }

    pub fn with_gain(pb: &mut ParamBuilder, name: &str, input: usize, output: usize, gain: f64) -> Result<Self> {
        pb.push(name);
        let weight = pb.normal("weight", &[output, input], gain / (input as f64).sqrt());
        let bias = pb.constant("bias", &[output], 0.0);
        pb.pop();
        Ok(Self { weight: weight?, bias: Some(bias?) })
    }

    pub fn no_bias(pb: &mut ParamBuilder, name: &str, input: usize, output: usize) -> Result<Self> {
        pb.push(name);
        let weight = pb.normal("weight", &[output, input], 1.0 / (input as f64).sqrt());
        pb.pop();
        Ok(Self { weight: weight?, bias: None })
    }

    /// Applies to the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let input = *dims.last().ok_or_else(|| Error::shape("rank >= 1", &dims))?;
        let rows = x.elem_count() / input;
        let y = x.reshape((rows, input))?.matmul(&self.weight.as_tensor().t()?)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b.as_tensor())?,
            None => y,
        };
        let mut out = dims;
        *out.last_mut().unwrap() = self.weight.dims()[0];
        Ok(y.reshape(out)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Var,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(pb: &mut ParamBuilder, name: &str, input: usize, output: usize, kernel: usize) -> Result<Self> {
        Self::with_gain(pb, name, input, output, kernel, 1.0)
    }

    pub fn with_gain(
        pb: &mut ParamBuilder,
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        gain: f64,
    ) -> Result<Self> {
        let fan_in = (input * kernel * kernel) as f64;
        pb.push(name);
        let weight = pb.normal("weight", &[output, input, kernel, kernel], gain / fan_in.sqrt());
        let bias = pb.constant("bias", &[output], 0.0);
        pb.pop();
        Ok(Self { weight: weight?, bias: bias?, padding: kernel / 2 })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(self.weight.as_tensor(), self.padding, 1, 1, 1)?;
        let b = self.bias.as_tensor().reshape((1, self.bias.dims()[0], 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: Var,
    pub beta: Var,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize) -> Result<Self> {
        let groups = (1..=8.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1);
        pb.push(name);
        let gamma = pb.constant("gamma", &[channels], 1.0);
        let beta = pb.constant("beta", &[channels], 0.0);
        pb.pop();
        Ok(Self { gamma: gamma?, beta: beta?, groups })
    }

    /// Normalizes `(B, C, H, W)` per sample and group.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let g = self.groups;
        let xg = x.reshape((b, g, (c / g) * h * w))?;
        let mean = xg.mean_keepdim(2)?;
        let centered = xg.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(2)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?.reshape((b, c, h, w))?;
        let gamma = self.gamma.as_tensor().reshape((1, c, 1, 1))?;
        let beta = self.beta.as_tensor().reshape((1, c, 1, 1))?;
        Ok(normed.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
    }
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Neighbor offsets of a 3x3x3 stencil in `(d, h, w)` order.
pub const STENCIL: usize = 27;

fn stencil_offsets() -> impl Iterator<Item = (isize, isize, isize)> {
    (-1isize..=1).flat_map(|a| (-1isize..=1).flat_map(move |b| (-1isize..=1).map(move |c| (a, b, c))))
}

/// Row indices of every site's 3x3x3 neighborhood for `batch` dense volumes
/// of `dims`, flattened in `(batch, d, h, w)` order. Missing neighbors point
/// at row `batch * d * h * w`.
pub fn dense_neighbor_table(batch: usize, dims: [usize; 3]) -> Vec<u32> {
    let [dd, hh, ww] = dims;
    let sites = dd * hh * ww;
    let sentinel = (batch * sites) as u32;
    let mut out = Vec::with_capacity(batch * sites * STENCIL);
    for b in 0..batch {
        for z in 0..dd {
            for y in 0..hh {
                for x in 0..ww {
                    for (oz, oy, ox) in stencil_offsets() {
                        let (nz, ny, nx) = (z as isize + oz, y as isize + oy, x as isize + ox);
                        if nz < 0 || ny < 0 || nx < 0 || nz >= dd as isize || ny >= hh as isize || nx >= ww as isize {
                            out.push(sentinel);
                        } else {
                            let idx = b * sites + (nz as usize * hh + ny as usize) * ww + nx as usize;
                            out.push(idx as u32);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Process-wide cache of dense neighbor tables keyed by `(batch, dims)`.
#[derive(Debug, Default)]
pub struct NeighborCache {
    tables: Mutex<HashMap<(usize, [usize; 3]), Tensor>>,
}

impl NeighborCache {
    pub fn dense(&self, batch: usize, dims: [usize; 3]) -> Result<Tensor> {
        let mut map = self.tables.lock().expect("neighbor cache poisoned");
        if let Some(t) = map.get(&(batch, dims)) {
            return Ok(t.clone());
        }
        let table = dense_neighbor_table(batch, dims);
        let t = Tensor::from_vec(table, batch * dims.iter().product::<usize>() * STENCIL, &Device::Cpu)?;
        map.insert((batch, dims), t.clone());
        Ok(t)
    }
}

/// Appends one zero row to `(M, C)` features so sentinel indices gather zeros.
pub fn with_zero_row(x: &Tensor) -> Result<Tensor> {
    let (_, c) = x.dims2()?;
    let zero = Tensor::zeros((1, c), x.dtype(), x.device())?;
    Ok(Tensor::cat(&[x, &zero], 0)?)
}

/// 3x3x3 convolution over sites given by a neighbor table.
#[derive(Debug, Clone)]
pub struct StencilConv {
    /// `(27 * in, out)`, neighbor-major.
    pub weight: Var,
    pub bias: Var,
    pub input: usize,
    pub output: usize,
}

impl StencilConv {
    pub fn new(pb: &mut ParamBuilder, name: &str, input: usize, output: usize) -> Result<Self> {
        let fan_in = (STENCIL * input) as f64;
        pb.push(name);
        let weight = pb.normal("weight", &[STENCIL * input, output], 1.0 / fan_in.sqrt());
        let bias = pb.constant("bias", &[output], 0.0);
        pb.pop();
        Ok(Self { weight: weight?, bias: bias?, input, output })
    }

    /// `x` is `(M, in)`; `neighbors` has `M * 27` entries, sentinel = `M`.
    pub fn forward(&self, x: &Tensor, neighbors: &Tensor) -> Result<Tensor> {
        let (m, c) = x.dims2()?;
        if c != self.input {
            return Err(Error::shape(self.input, c));
        }
        let padded = with_zero_row(x)?;
        let gathered = padded.index_select(neighbors, 0)?.reshape((m, STENCIL * c))?;
        Ok(gathered.matmul(self.weight.as_tensor())?.broadcast_add(self.bias.as_tensor())?)
    }
}

/// 2x average pooling of `(B, D, H, W, C)` volumes in all three spatial axes.
pub fn pool3d(x: &Tensor) -> Result<Tensor> {
    let (b, d, h, w, c) = x.dims5()?;
    if d % 2 + h % 2 + w % 2 != 0 {
        return Err(Error::shape("even spatial dims", x.dims()));
    }
    let y = x.reshape(&[b * d / 2, 2, h / 2, 2, w / 2, 2, c][..])?;
    let y = y.sum(5)?.sum(3)?.sum(1)?;
    Ok((y / 8.0)?.reshape((b, d / 2, h / 2, w / 2, c))?)
}

/// 2x nearest-neighbor upsampling of `(B, D, H, W, C)` volumes.
pub fn upsample3d(x: &Tensor) -> Result<Tensor> {
    let (b, d, h, w, c) = x.dims5()?;
    let y = x.reshape(&[b * d, 1, h, 1, w, 1, c][..])?;
    let y = y.broadcast_as(&[b * d, 2, h, 2, w, 2, c][..])?.contiguous()?;
    Ok(y.reshape((b, d * 2, h * 2, w * 2, c))?)
}

/// Sinusoidal features of scalar `values`, `dim` wide (`dim` even).
pub fn sinusoidal(values: &[f64], dim: usize, max_period: f64) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(values.len() * dim);
    for &v in values {
        for i in 0..half {
            let freq = (-(max_period.ln()) * i as f64 / half as f64).exp();
            out.push((v * freq).sin());
        }
        for i in 0..half {
            let freq = (-(max_period.ln()) * i as f64 / half as f64).exp();
            out.push((v * freq).cos());
        }
    }
    out
}

pub const POSE_FEATURES: usize = 16;

/// Fourier features of camera azimuth and elevation.
pub fn pose_features(azimuth_deg: f64, elevation_deg: f64) -> Vec<f64> {
    let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
    let mut f = Vec::with_capacity(POSE_FEATURES);
    for k in 1..=4 {
        let k = k as f64;
        f.extend_from_slice(&[(k * az).sin(), (k * az).cos(), (k * el).sin(), (k * el).cos()]);
    }
    f
}

pub fn tensor_from_rows(data: Vec<f64>, rows: usize, cols: usize, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, (rows, cols), &Device::Cpu)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_groups_by_prefix() {
        assert_eq!(ParamGroup::of("backbone.down0.conv1.weight"), ParamGroup::Backbone);
        assert_eq!(ParamGroup::of("frustum.in.weight"), ParamGroup::Other);
    }

    #[test]
    fn builder_names_and_duplicates() {
        let mut pb = ParamBuilder::new(0, DType::F64);
        pb.push("a");
        Linear::new(&mut pb, "l", 3, 2).unwrap();
        assert!(Linear::new(&mut pb, "l", 3, 2).is_err());
        pb.pop();
        let store = pb.finish();
        let names: Vec<_> = store.iter().map(|(k, _)| k.as_str()).collect();
        assert_eq!(names, vec!["a.l.bias", "a.l.weight"]);
        assert_eq!(store.num_scalars(), 8);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0], [-50.0, 0.0, 50.0]], &Device::Cpu).unwrap();
        let s = softmax_last(&x).unwrap().sum(1).unwrap().to_vec1::<f64>().unwrap();
        for v in s {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn stencil_conv_matches_direct_convolution() {
        let dims = [3usize, 4, 2];
        let (cin, cout) = (2usize, 3usize);
        let mut pb = ParamBuilder::new(4, DType::F64);
        let conv = StencilConv::new(&mut pb, "c", cin, cout).unwrap();
        let mut rng = SeededRng::new(1);
        let sites: usize = dims.iter().product();
        let xv = rng.normals(sites * cin);
        let x = Tensor::from_vec(xv.clone(), (sites, cin), &Device::Cpu).unwrap();
        let table = Tensor::from_vec(dense_neighbor_table(1, dims), sites * STENCIL, &Device::Cpu).unwrap();
        let y = conv.forward(&x, &table).unwrap().to_vec2::<f64>().unwrap();
        let w = conv.weight.as_tensor().to_vec2::<f64>().unwrap();
        let at = |z: isize, yy: isize, xx: isize, c: usize| -> f64 {
            if z < 0 || yy < 0 || xx < 0 || z >= 3 || yy >= 4 || xx >= 2 {
                0.0
            } else {
                xv[((z as usize * 4 + yy as usize) * 2 + xx as usize) * cin + c]
            }
        };
        for z in 0..3 {
            for yy in 0..4 {
                for xx in 0..2 {
                    let s = (z * 4 + yy) * 2 + xx;
                    for o in 0..cout {
                        let mut acc = 0.0;
                        for (n, (oz, oy, ox)) in stencil_offsets().enumerate() {
                            for c in 0..cin {
                                acc += w[n * cin + c][o] * at(z as isize + oz, yy as isize + oy, xx as isize + ox, c);
                            }
                        }
                        assert!((acc - y[s][o]).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn pool_inverts_upsample() {
        let mut rng = SeededRng::new(3);
        let x = rng.normal_tensor(&[2, 1, 2, 3, 2], DType::F64).unwrap();
        let up = upsample3d(&x).unwrap();
        assert_eq!(up.dims(), &[2, 2, 4, 6, 2]);
        let back = pool3d(&up).unwrap();
        let err = (back - &x).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(err < 1e-12);
        assert!(pool3d(&x).is_err());
    }

    #[test]
    fn pose_features_are_periodic() {
        let a = pose_features(-180.0, 0.0);
        let b = pose_features(180.0, 0.0);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
