//! Minimal differentiable building blocks: dense layers with hand-written
//! backpropagation, a shared-MLP/max-pool point-set encoder, a sinusoidal
//! time embedding, Adam and a binary checkpoint format.
//!
//! Everything runs in `f64`. Batches are row-major `ndarray` matrices, one
//! sample per row; a layer's output row depends only on its input row, which
//! keeps results independent of how rows are batched.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::POSE_DIM;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NetError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NetError::ShapeMismatch(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn matrix(&self) -> ArrayView2<'_, f64> {
        let (r, c) = match self.shape[..] {
            [r, c] => (r, c),
            [c] => (1, c),
            _ => panic!("tensor of rank {} used as a matrix", self.shape.len()),
        };
        ArrayView2::from_shape((r, c), &self.data).expect("shape checked at construction")
    }
}

/// Named parameters plus Adam moments and step counter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    first_moment: BTreeMap<String, Vec<f64>>,
    second_moment: BTreeMap<String, Vec<f64>>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        self.first_moment.insert(name.clone(), vec![0.0; tensor.len()]);
        self.second_moment.insert(name.clone(), vec![0.0; tensor.len()]);
        self.params.insert(name, tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, NetError> {
        self.params.get(name).ok_or_else(|| NetError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, NetError> {
        self.params.get_mut(name).ok_or_else(|| NetError::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Drops optimizer state, keeping parameter values.
    pub fn reset_optimizer(&mut self) {
        for m in self.first_moment.values_mut().chain(self.second_moment.values_mut()) {
            m.fill(0.0);
        }
        self.step = 0;
    }

    pub fn zero_grads(&self) -> Grads {
        Grads { map: self.params.iter().map(|(k, t)| (k.clone(), vec![0.0; t.len()])).collect() }
    }

    /// True when parameter values (not optimizer state) are bit-identical.
    pub fn same_values(&self, other: &ParamStore) -> bool {
        self.params == other.params
    }
}

/// Gradient accumulator with the same names and sizes as a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    map: BTreeMap<String, Vec<f64>>,
}

impl Grads {
    pub fn get(&self, name: &str) -> Result<&[f64], NetError> {
        self.map.get(name).map(Vec::as_slice).ok_or_else(|| NetError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut [f64], NetError> {
        self.map.get_mut(name).map(Vec::as_mut_slice).ok_or_else(|| NetError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<f64>)> {
        self.map.iter()
    }

    pub fn accumulate(&mut self, other: &Grads) -> Result<(), NetError> {
        for (name, g) in &other.map {
            let dst = self.get_mut(name)?;
            if dst.len() != g.len() {
                return Err(NetError::ShapeMismatch(format!("gradient `{name}`")));
            }
            dst.iter_mut().zip(g).for_each(|(d, s)| *d += s);
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        self.map.values_mut().flatten().for_each(|g| *g *= factor);
    }

    pub fn is_finite(&self) -> bool {
        self.map.values().flatten().all(|g| g.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.map.values().flatten().map(|g| g * g).sum::<f64>().sqrt()
    }

    /// Sums per-chunk gradients in the given order.
    pub fn sum_ordered(parts: Vec<Grads>) -> Option<Grads> {
        let mut it = parts.into_iter();
        let mut total = it.next()?;
        for g in it {
            total.accumulate(&g).expect("chunks share one layout");
        }
        Some(total)
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Affine layer `y = x W + b` with `W` stored as `[fan_in, fan_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self { weight: format!("{name}.w"), bias: format!("{name}.b"), fan_in, fan_out }
    }

    /// Fan-in scaled uniform initialization, or all zeros.
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng, zero: bool) {
        let bound = 1.0 / (self.fan_in as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> {
            if zero {
                vec![0.0; n]
            } else {
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            }
        };
        let w = draw(self.fan_in * self.fan_out);
        let b = draw(self.fan_out);
        store.insert(&self.weight, Tensor { shape: vec![self.fan_in, self.fan_out], data: w });
        store.insert(&self.bias, Tensor { shape: vec![self.fan_out], data: b });
    }

    fn params<'a>(&self, store: &'a ParamStore) -> Result<(ArrayView2<'a, f64>, ArrayView1<'a, f64>), NetError> {
        let w = store.get(&self.weight)?;
        let b = store.get(&self.bias)?;
        if w.shape() != [self.fan_in, self.fan_out] || b.shape() != [self.fan_out] {
            return Err(NetError::ShapeMismatch(format!(
                "`{}` is {:?}, layer expects [{}, {}]",
                self.weight,
                w.shape(),
                self.fan_in,
                self.fan_out
            )));
        }
        Ok((w.matrix(), ArrayView1::from(b.data())))
    }

    pub fn forward(&self, store: &ParamStore, x: &ArrayView2<f64>) -> Result<Array2<f64>, NetError> {
        if x.ncols() != self.fan_in {
            return Err(NetError::ShapeMismatch(format!(
                "`{}` takes {} inputs, got {}",
                self.weight,
                self.fan_in,
                x.ncols()
            )));
        }
        let (w, b) = self.params(store)?;
        let mut y = x.dot(&w);
        y += &b;
        Ok(y)
    }

    /// Accumulates `dW = xᵀ dy`, `db = Σ dy` and returns `dx = dy Wᵀ`.
    pub fn backward(
        &self,
        store: &ParamStore,
        x: &ArrayView2<f64>,
        dy: &ArrayView2<f64>,
        grads: &mut Grads,
    ) -> Result<Array2<f64>, NetError> {
        if dy.ncols() != self.fan_out || dy.nrows() != x.nrows() {
            return Err(NetError::ShapeMismatch(format!("output gradient for `{}`", self.weight)));
        }
        let (w, _) = self.params(store)?;
        let dw = x.t().dot(dy);
        let gw = grads.get_mut(&self.weight)?;
        gw.iter_mut().zip(dw.iter()).for_each(|(g, d)| *g += d);
        let db = dy.sum_axis(Axis(0));
        let gb = grads.get_mut(&self.bias)?;
        gb.iter_mut().zip(db.iter()).for_each(|(g, d)| *g += d);
        Ok(dy.dot(&w.t()))
    }
}

/// Layer widths, input first. Hidden layers use SiLU, the output is linear.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    widths: Vec<usize>,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>) -> Result<Self, NetError> {
        if widths.len() < 3 {
            return Err(NetError::InvalidSpec(format!(
                "an MLP needs at least one hidden layer, got widths {widths:?}"
            )));
        }
        if widths.contains(&0) {
            return Err(NetError::InvalidSpec(format!("zero width in {widths:?}")));
        }
        Ok(Self { widths })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub spec: MlpSpec,
    layers: Vec<Linear>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

impl Mlp {
    pub fn new(name: &str, spec: MlpSpec) -> Self {
        let layers =
            spec.widths.windows(2).enumerate().map(|(i, w)| Linear::new(&format!("{name}.{i}"), w[0], w[1])).collect();
        Self { spec, layers }
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng, zero_output: bool) {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.init(store, rng, zero_output && i == last);
        }
    }

    /// Inference forward pass without caching.
    pub fn apply(&self, store: &ParamStore, x: &ArrayView2<f64>) -> Result<Array2<f64>, NetError> {
        let mut h = self.layers[0].forward(store, x)?;
        for layer in &self.layers[1..] {
            h.mapv_inplace(silu);
            h = layer.forward(store, &h.view())?;
        }
        Ok(h)
    }

    pub fn forward(&self, store: &ParamStore, x: Array2<f64>) -> Result<(Array2<f64>, MlpCache), NetError> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len() - 1);
        let mut h = self.layers[0].forward(store, &x.view())?;
        inputs.push(x);
        for layer in &self.layers[1..] {
            let a = h.mapv(silu);
            pre.push(h);
            h = layer.forward(store, &a.view())?;
            inputs.push(a);
        }
        Ok((h, MlpCache { inputs, pre }))
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &MlpCache,
        dy: &ArrayView2<f64>,
        grads: &mut Grads,
    ) -> Result<Array2<f64>, NetError> {
        let mut d = dy.to_owned();
        for i in (0..self.layers.len()).rev() {
            d = self.layers[i].backward(store, &cache.inputs[i].view(), &d.view(), grads)?;
            if i > 0 {
                d.zip_mut_with(&cache.pre[i - 1], |g, &z| *g *= silu_grad(z));
            }
        }
        Ok(d)
    }
}

/// Sinusoidal embedding of `tau`: interleaved `(sin ω_k τ, cos ω_k τ)` with
/// frequencies spaced geometrically from 1 to 1000.
pub fn time_embed(tau: f64, dim: usize) -> Vec<f64> {
    assert!(dim >= 2 && dim.is_multiple_of(2), "embedding dimension must be even");
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let omega = if half == 1 { 1.0 } else { 1000f64.powf(k as f64 / (half - 1) as f64) };
        let (s, c) = (omega * tau).sin_cos();
        out.push(s);
        out.push(c);
    }
    out
}

/// Shared per-point MLP followed by a coordinate-wise max over points.
#[derive(Debug, Clone)]
pub struct PointEncoder {
    pub mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    mlp: MlpCache,
    total_rows: usize,
    /// Row (into the stacked point matrix) that won the max, per cloud and
    /// feature.
    argmax: Vec<Vec<usize>>,
}

impl PointEncoder {
    pub fn feature_dim(&self) -> usize {
        self.mlp.spec.output_dim()
    }

    fn stack(clouds: &[ArrayView2<f64>]) -> Result<(Array2<f64>, Vec<usize>), NetError> {
        let mut offsets = Vec::with_capacity(clouds.len() + 1);
        offsets.push(0);
        for c in clouds {
            if c.ncols() != 3 || c.nrows() == 0 {
                return Err(NetError::ShapeMismatch(format!("point cloud of shape {:?}", c.shape())));
            }
            offsets.push(offsets.last().unwrap() + c.nrows());
        }
        let views: Vec<_> = clouds.to_vec();
        let stacked = ndarray::concatenate(Axis(0), &views).map_err(|e| NetError::ShapeMismatch(e.to_string()))?;
        Ok((stacked, offsets))
    }

    fn max_pool(y: &Array2<f64>, offsets: &[usize]) -> (Array2<f64>, Vec<Vec<usize>>) {
        let f = y.ncols();
        let n = offsets.len() - 1;
        let mut feats = Array2::zeros((n, f));
        let mut argmax = vec![vec![0usize; f]; n];
        for b in 0..n {
            let (lo, hi) = (offsets[b], offsets[b + 1]);
            let best = &mut argmax[b];
            best.fill(lo);
            for r in lo + 1..hi {
                let row = y.row(r);
                for (j, &v) in row.iter().enumerate() {
                    if v > y[[best[j], j]] {
                        best[j] = r;
                    }
                }
            }
            for j in 0..f {
                feats[[b, j]] = y[[best[j], j]];
            }
        }
        (feats, argmax)
    }

    /// Global feature for each cloud (rows = clouds).
    pub fn encode(&self, store: &ParamStore, clouds: &[ArrayView2<f64>]) -> Result<Array2<f64>, NetError> {
        let (x, offsets) = Self::stack(clouds)?;
        let y = self.mlp.apply(store, &x.view())?;
        Ok(Self::max_pool(&y, &offsets).0)
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        clouds: &[ArrayView2<f64>],
    ) -> Result<(Array2<f64>, EncoderCache), NetError> {
        let (x, offsets) = Self::stack(clouds)?;
        let total_rows = x.nrows();
        let (y, mlp) = self.mlp.forward(store, x)?;
        let (feats, argmax) = Self::max_pool(&y, &offsets);
        Ok((feats, EncoderCache { mlp, total_rows, argmax }))
    }

    /// Routes each feature gradient to the point that attained the max.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &EncoderCache,
        d_feat: &ArrayView2<f64>,
        grads: &mut Grads,
    ) -> Result<(), NetError> {
        let mut dy = Array2::zeros((cache.total_rows, self.feature_dim()));
        for (b, rows) in cache.argmax.iter().enumerate() {
            for (j, &r) in rows.iter().enumerate() {
                dy[[r, j]] += d_feat[[b, j]];
            }
        }
        self.mlp.backward(store, &cache.mlp, &dy.view(), grads)?;
        Ok(())
    }
}

/// Sizes of a point-cloud conditioned network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetArch {
    pub feat_dim: usize,
    pub point_hidden: usize,
    pub embed_dim: usize,
    pub head_hidden: Vec<usize>,
    pub out_dim: usize,
}

impl NetArch {
    /// Velocity field / policy network: 9 outputs.
    pub fn velocity() -> Self {
        Self { feat_dim: 128, point_hidden: 64, embed_dim: 32, head_hidden: vec![256, 256], out_dim: POSE_DIM }
    }

    /// Critic trunk whose two outputs are the rotation and translation heads.
    pub fn critic() -> Self {
        Self { out_dim: 2, ..Self::velocity() }
    }

    pub fn head_input_dim(&self) -> usize {
        self.feat_dim + POSE_DIM + self.embed_dim
    }
}

impl Default for NetArch {
    fn default() -> Self {
        Self::velocity()
    }
}

/// Network input for one state: cloud feature, pose and time embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct StateEncoding {
    pub feature: Vec<f64>,
    pub pose: [f64; POSE_DIM],
    pub time_embedding: Vec<f64>,
}

impl StateEncoding {
    pub fn new(feature: &[f64], pose: &[f64; POSE_DIM], time: f64, embed_dim: usize) -> Self {
        Self { feature: feature.to_vec(), pose: *pose, time_embedding: time_embed(time, embed_dim) }
    }

    pub fn to_input(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.feature.len() + POSE_DIM + self.time_embedding.len());
        v.extend_from_slice(&self.feature);
        v.extend_from_slice(&self.pose);
        v.extend_from_slice(&self.time_embedding);
        v
    }
}

/// One network query: which cloud (index into the batch), pose and time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateRow {
    pub cloud: usize,
    pub pose: [f64; POSE_DIM],
    pub time: f64,
}

/// Point encoder plus an MLP head over `[feature, pose, time embedding]`.
#[derive(Debug, Clone)]
pub struct ConditionedNet {
    pub arch: NetArch,
    pub encoder: PointEncoder,
    pub head: Mlp,
    prefix: String,
}

#[derive(Debug, Clone)]
pub struct NetCache {
    encoder: EncoderCache,
    head: MlpCache,
    row_cloud: Vec<usize>,
    n_clouds: usize,
}

impl ConditionedNet {
    pub fn new(prefix: &str, arch: NetArch) -> Result<Self, NetError> {
        let encoder = PointEncoder {
            mlp: Mlp::new(&format!("{prefix}.enc"), MlpSpec::new(vec![3, arch.point_hidden, arch.feat_dim])?),
        };
        let mut widths = vec![arch.head_input_dim()];
        widths.extend(&arch.head_hidden);
        widths.push(arch.out_dim);
        let head = Mlp::new(&format!("{prefix}.head"), MlpSpec::new(widths)?);
        Ok(Self { arch, encoder, head, prefix: prefix.to_string() })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    /// Recovers the architecture from parameter shapes in `store`.
    pub fn from_store(prefix: &str, store: &ParamStore) -> Result<Self, NetError> {
        let shape = |name: String| -> Result<Vec<usize>, NetError> { Ok(store.get(&name)?.shape().to_vec()) };
        let e0 = shape(format!("{prefix}.enc.0.w"))?;
        let e1 = shape(format!("{prefix}.enc.1.w"))?;
        let mut head_dims = Vec::new();
        let mut i = 0;
        while store.contains(&format!("{prefix}.head.{i}.w")) {
            head_dims.push(shape(format!("{prefix}.head.{i}.w"))?);
            i += 1;
        }
        if head_dims.len() < 2 || e0.len() != 2 || e1.len() != 2 {
            return Err(NetError::InvalidSpec(format!("`{prefix}` parameters do not form a conditioned net")));
        }
        let feat_dim = e1[1];
        let in_dim = head_dims[0][0];
        if in_dim <= feat_dim + POSE_DIM {
            return Err(NetError::InvalidSpec(format!("head input width {in_dim} leaves no time embedding")));
        }
        let arch = NetArch {
            feat_dim,
            point_hidden: e0[1],
            embed_dim: in_dim - feat_dim - POSE_DIM,
            head_hidden: head_dims[..head_dims.len() - 1].iter().map(|d| d[1]).collect(),
            out_dim: head_dims.last().unwrap()[1],
        };
        let net = Self::new(prefix, arch)?;
        // Validate every shape up front.
        for layer in net.encoder.mlp.layers().iter().chain(net.head.layers()) {
            layer.params(store)?;
        }
        Ok(net)
    }

    /// Initializes parameters; `zero_output` zeroes the final head layer.
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng, zero_output: bool) {
        self.encoder.mlp.init(store, rng, false);
        self.head.init(store, rng, zero_output);
    }

    pub fn encode(&self, store: &ParamStore, cloud: ArrayView2<f64>) -> Result<Vec<f64>, NetError> {
        Ok(self.encoder.encode(store, &[cloud])?.row(0).to_vec())
    }

    fn write_input(&self, dst: &mut [f64], feature: &[f64], pose: &[f64; POSE_DIM], time: f64) {
        let f = self.arch.feat_dim;
        dst[..f].copy_from_slice(feature);
        dst[f..f + POSE_DIM].copy_from_slice(pose);
        dst[f + POSE_DIM..].copy_from_slice(&time_embed(time, self.arch.embed_dim));
    }

    /// Inference on states that share one precomputed cloud feature.
    pub fn predict(
        &self,
        store: &ParamStore,
        feature: &[f64],
        poses: &[[f64; POSE_DIM]],
        times: &[f64],
    ) -> Result<Array2<f64>, NetError> {
        if feature.len() != self.arch.feat_dim || poses.len() != times.len() {
            return Err(NetError::ShapeMismatch("predict inputs".into()));
        }
        let mut x = Array2::zeros((poses.len(), self.arch.head_input_dim()));
        for (i, (p, &t)) in poses.iter().zip(times).enumerate() {
            self.write_input(x.row_mut(i).as_slice_mut().unwrap(), feature, p, t);
        }
        self.head.apply(store, &x.view())
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        clouds: &[ArrayView2<f64>],
        rows: &[StateRow],
    ) -> Result<(Array2<f64>, NetCache), NetError> {
        let (feats, encoder) = self.encoder.forward(store, clouds)?;
        let mut x = Array2::zeros((rows.len(), self.arch.head_input_dim()));
        for (i, r) in rows.iter().enumerate() {
            if r.cloud >= clouds.len() {
                return Err(NetError::ShapeMismatch(format!("row refers to cloud {}", r.cloud)));
            }
            let feat = feats.row(r.cloud);
            self.write_input(x.row_mut(i).as_slice_mut().unwrap(), feat.as_slice().unwrap(), &r.pose, r.time);
        }
        let (out, head) = self.head.forward(store, x)?;
        let cache =
            NetCache { encoder, head, row_cloud: rows.iter().map(|r| r.cloud).collect(), n_clouds: clouds.len() };
        Ok((out, cache))
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &NetCache,
        d_out: &ArrayView2<f64>,
        grads: &mut Grads,
    ) -> Result<(), NetError> {
        let d_in = self.head.backward(store, &cache.head, d_out, grads)?;
        let f = self.arch.feat_dim;
        let mut d_feat = Array2::<f64>::zeros((cache.n_clouds, f));
        for (i, &c) in cache.row_cloud.iter().enumerate() {
            let mut dst = d_feat.row_mut(c);
            dst.iter_mut().zip(d_in.row(i).iter().take(f)).for_each(|(a, b)| *a += b);
        }
        self.encoder.backward(store, &cache.encoder, &d_feat.view(), grads)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(store: &mut ParamStore, grads: &Grads, cfg: &AdamConfig) -> Result<(), NetError> {
    store.step += 1;
    let t = store.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, param) in store.params.iter_mut() {
        let g = grads.get(name)?;
        if g.len() != param.len() {
            return Err(NetError::ShapeMismatch(format!("gradient for `{name}`")));
        }
        let m = store.first_moment.get_mut(name).unwrap();
        let v = store.second_moment.get_mut(name).unwrap();
        for i in 0..g.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            param.data[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RFMP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    F64,
    /// Lossy; values are rounded to `f32` on write.
    F32,
}

/// Layout: magic, version (u32), precision flag (u8), tensor count (u32),
/// then per tensor name length (u32), name bytes, rank (u32), dims (u64
/// each) and the raw little-endian values.
pub fn write_checkpoint<W: Write>(store: &ParamStore, mut w: W, precision: Precision) -> Result<(), NetError> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&[match precision {
        Precision::F64 => 0u8,
        Precision::F32 => 1u8,
    }])?;
    w.write_all(&(store.params.len() as u32).to_le_bytes())?;
    for (name, t) in &store.params {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for &d in &t.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in &t.data {
            match precision {
                Precision::F64 => w.write_all(&v.to_le_bytes())?,
                Precision::F32 => w.write_all(&(v as f32).to_le_bytes())?,
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N], NetError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| NetError::Checkpoint(format!("truncated: {e}")))?;
    Ok(buf)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParamStore, NetError> {
    if &read_array::<4, _>(&mut r)? != CHECKPOINT_MAGIC {
        return Err(NetError::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != CHECKPOINT_VERSION {
        return Err(NetError::Checkpoint(format!("unsupported version {version}")));
    }
    let precision = match read_array::<1, _>(&mut r)?[0] {
        0 => Precision::F64,
        1 => Precision::F32,
        other => return Err(NetError::Checkpoint(format!("unknown precision flag {other}"))),
    };
    let count = u32::from_le_bytes(read_array(&mut r)?);
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|e| NetError::Checkpoint(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| NetError::Checkpoint("non-utf8 tensor name".into()))?;
        let rank = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let shape = (0..rank)
            .map(|_| Ok(u64::from_le_bytes(read_array(&mut r)?) as usize))
            .collect::<Result<Vec<_>, NetError>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                Ok(match precision {
                    Precision::F64 => f64::from_le_bytes(read_array(&mut r)?),
                    Precision::F32 => f32::from_le_bytes(read_array(&mut r)?) as f64,
                })
            })
            .collect::<Result<Vec<_>, NetError>>()?;
        store.insert(name, Tensor::new(shape, data)?);
    }
    Ok(store)
}

pub fn save_checkpoint(store: &ParamStore, path: &Path, precision: Precision) -> Result<(), NetError> {
    write_checkpoint(store, BufWriter::new(File::create(path)?), precision)
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore, NetError> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
