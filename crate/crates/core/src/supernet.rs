//! K independent, channel-reduced supernets.
//!
//! Every supernet materializes every (cell, edge, weighted op) triple at width
//! `C / G`, plus its own stem, reduction blocks and classifier. A subnet's
//! forward pass touches only the parameters of its chosen operations in the
//! supernet its partition bin maps to.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use rand_distr::{Distribution, Normal};

use crate::engine::{sgd_step, ParamId, Real, SgdConfig, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::partition::{Partition, ProbeEngine, ProbeSpec, Router};
use crate::seed;
use crate::space::{FlopsModel, SearchSpace, Subnet};

/// Role of a parameter tensor, used for the parameter-budget breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Conv weight of a searchable cell operation.
    OpWeight,
    /// Conv/linear weight of the stem, reductions or classifier.
    FixedWeight,
    BnAffine,
    Bias,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvBn {
    w: ParamId,
    gamma: ParamId,
    beta: ParamId,
}

/// Parameter ids of one supernet; identical across all K supernets.
#[derive(Debug, Clone, PartialEq)]
struct Layout {
    stem: ConvBn,
    reductions: Vec<ConvBn>,
    /// `[stage][repeat][edge][op]`, `None` for weightless ops.
    cells: Vec<Vec<Vec<Vec<Option<ConvBn>>>>>,
    fc_w: ParamId,
    fc_b: ParamId,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    kinds: Vec<ParamKind>,
    fan_in: Vec<usize>,
}

impl Layout {
    fn new(space: &SearchSpace, g: usize) -> Self {
        let mut names = Vec::new();
        let mut shapes = Vec::new();
        let mut kinds = Vec::new();
        let mut fan_in = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, kind: ParamKind, fan: usize| {
            names.push(name);
            shapes.push(shape);
            kinds.push(kind);
            fan_in.push(fan);
            ParamId(names.len() - 1)
        };
        let mut conv_bn = |prefix: &str, cout: usize, cin: usize, k: usize, kind: ParamKind| ConvBn {
            w: add(format!("{prefix}/w"), vec![cout, cin, k, k], kind, cin * k * k),
            gamma: add(format!("{prefix}/gamma"), vec![cout], ParamKind::BnAffine, 0),
            beta: add(format!("{prefix}/beta"), vec![cout], ParamKind::BnAffine, 0),
        };
        let widths: Vec<usize> = space.channel_plan.iter().map(|c| c / g).collect();
        let stem = conv_bn("stem", widths[0], space.input_shape[0], 3, ParamKind::FixedWeight);
        let mut reductions = Vec::new();
        let mut cells = Vec::new();
        for (s, &c) in widths.iter().enumerate() {
            if s > 0 {
                reductions.push(conv_bn(&format!("reduce{s}"), c, widths[s - 1], 3, ParamKind::FixedWeight));
            }
            let mut stage = Vec::new();
            for r in 0..space.cell_repeats {
                let mut cell = Vec::new();
                for (j, e) in space.edges.iter().enumerate() {
                    let ops = e
                        .candidates
                        .iter()
                        .map(|op| {
                            (op.flops_model == FlopsModel::Conv).then(|| {
                                conv_bn(
                                    &format!("s{s}/c{r}/e{j}/{}", op.name),
                                    c,
                                    c,
                                    op.kernel_size,
                                    ParamKind::OpWeight,
                                )
                            })
                        })
                        .collect();
                    cell.push(ops);
                }
                stage.push(cell);
            }
            cells.push(stage);
        }
        let last = *widths.last().expect("validated channel plan");
        let fc_w = add("fc/w".into(), vec![space.num_classes, last], ParamKind::FixedWeight, last);
        let fc_b = add("fc/b".into(), vec![space.num_classes], ParamKind::Bias, 0);
        Layout { stem, reductions, cells, fc_w, fc_b, names, shapes, kinds, fan_in }
    }

    fn len(&self) -> usize {
        self.names.len()
    }
}

/// Parameters, momentum buffers and update counter of one supernet.
#[derive(Debug, Clone, PartialEq)]
pub struct Supernet<T> {
    params: Vec<Tensor<T>>,
    velocity: Vec<Tensor<T>>,
    updates: u64,
}

impl<T: Real> Supernet<T> {
    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0]
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Order-sensitive fingerprint of every parameter bit.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.params {
            for v in t.data() {
                let bits = v.to_f64().unwrap_or(f64::NAN).to_bits();
                h = seed::mix64(h ^ bits);
            }
        }
        h
    }

    /// One SGD update from a gradient map; parameters without a gradient are untouched.
    pub fn apply(&mut self, grads: &std::collections::BTreeMap<ParamId, Tensor<T>>, cfg: SgdConfig) -> Result<()> {
        for (id, g) in grads {
            sgd_step(&mut self.params[id.0], g, &mut self.velocity[id.0], cfg)?;
        }
        self.updates += 1;
        Ok(())
    }
}

/// Parameter counts by role, summed over all K supernets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ParamCounts {
    pub op_weights: u64,
    pub fixed_weights: u64,
    pub bn_affine: u64,
    pub biases: u64,
}

impl ParamCounts {
    pub fn total(&self) -> u64 {
        self.op_weights + self.fixed_weights + self.bn_affine + self.biases
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupernetStore<T> {
    space: SearchSpace,
    g: usize,
    seed: u64,
    partition_hash: String,
    layout: Layout,
    nets: Vec<Supernet<T>>,
    /// Global SBS step counter (shared by all supernets).
    pub step: u64,
    /// Completed training epochs.
    pub epoch: u64,
}

impl<T: Real> SupernetStore<T> {
    /// K independent fan-in scaled initializations; BN gamma = 1, beta = 0.
    pub fn init(space: &SearchSpace, partition: &Partition, g: usize, seed: u64) -> Result<Self> {
        partition.check_space(space)?;
        Self::init_raw(space, partition.k, g, seed, partition.hash())
    }

    fn init_raw(space: &SearchSpace, k: usize, g: usize, seed: u64, partition_hash: String) -> Result<Self> {
        space.validate()?;
        space.check_divisor(g)?;
        if k == 0 {
            return Err(Error::Config("K must be positive".into()));
        }
        let layout = Layout::new(space, g);
        let nets = (0..k)
            .map(|idx| {
                let mut rng = seed::rng(seed::derive_index(seed, idx as u64));
                let params = (0..layout.len())
                    .map(|p| {
                        let shape = &layout.shapes[p];
                        match layout.kinds[p] {
                            ParamKind::OpWeight | ParamKind::FixedWeight => {
                                let gain = if ParamId(p) == layout.fc_w { 1.0 } else { 2.0 };
                                let std = (gain / layout.fan_in[p] as f64).sqrt();
                                let normal = Normal::new(0.0, std).expect("positive std");
                                Tensor::from_fn(shape, |_| T::of(normal.sample(&mut rng)))
                            }
                            ParamKind::BnAffine if layout.names[p].ends_with("gamma") => {
                                Tensor::full(shape, T::one())
                            }
                            ParamKind::BnAffine | ParamKind::Bias => Tensor::zeros(shape),
                        }
                    })
                    .collect();
                let velocity = layout.shapes.iter().map(|s| Tensor::zeros(s)).collect();
                Supernet { params, velocity, updates: 0 }
            })
            .collect();
        Ok(SupernetStore { space: space.clone(), g, seed, partition_hash, layout, nets, step: 0, epoch: 0 })
    }

    pub fn k(&self) -> usize {
        self.nets.len()
    }

    pub fn g(&self) -> usize {
        self.g
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn partition_hash(&self) -> &str {
        &self.partition_hash
    }

    pub fn net(&self, k: usize) -> &Supernet<T> {
        &self.nets[k]
    }

    pub fn net_mut(&mut self, k: usize) -> &mut Supernet<T> {
        &mut self.nets[k]
    }

    pub fn nets_mut(&mut self) -> &mut [Supernet<T>] {
        &mut self.nets
    }

    pub fn param_names(&self) -> &[String] {
        &self.layout.names
    }

    pub fn update_counts(&self) -> Vec<u64> {
        self.nets.iter().map(|n| n.updates).collect()
    }

    /// Ids of the weight tensors a subnet reads (BN affine included).
    pub fn params_used_by(&self, subnet: &Subnet) -> Vec<ParamId> {
        let l = &self.layout;
        let mut ids = vec![l.stem.w, l.stem.gamma, l.stem.beta, l.fc_w, l.fc_b];
        for r in &l.reductions {
            ids.extend([r.w, r.gamma, r.beta]);
        }
        for stage in &l.cells {
            for cell in stage {
                for (edge, &c) in cell.iter().zip(&subnet.choices) {
                    if let Some(cb) = edge[c] {
                        ids.extend([cb.w, cb.gamma, cb.beta]);
                    }
                }
            }
        }
        ids.sort();
        ids
    }

    pub fn check_router(&self, router: &Router) -> Result<()> {
        if router.partition_hash() != self.partition_hash {
            return Err(Error::Contract(format!(
                "store was built for partition {}, router uses {}",
                short(&self.partition_hash),
                short(router.partition_hash())
            )));
        }
        if router.k() != self.k() {
            return Err(Error::Contract(format!("store has K = {}, partition has K = {}", self.k(), router.k())));
        }
        Ok(())
    }

    /// Logits of `subnet` with supernet `k`'s weights; `k` must match the
    /// partition assignment of the subnet.
    pub fn forward(&self, tape: &mut Tape<T>, router: &Router, subnet: &Subnet, k: usize, images: &Tensor<T>) -> Result<Var> {
        self.check_router(router)?;
        let routed = router.route(subnet)?;
        if routed != k {
            return Err(Error::Contract(format!("subnet belongs to supernet {routed}, not {k}")));
        }
        self.forward_unchecked(tape, subnet, k, images)
    }

    /// Forward pass without the partition check.
    pub fn forward_unchecked(&self, tape: &mut Tape<T>, subnet: &Subnet, k: usize, images: &Tensor<T>) -> Result<Var> {
        self.space.check_subnet(subnet)?;
        let [c, h, w] = self.space.input_shape;
        if images.shape().len() != 4 || images.shape()[1..] != [c, h, w] {
            return Err(Error::Shape { op: "forward", lhs: images.shape().to_vec(), rhs: vec![0, c, h, w] });
        }
        let net = &self.nets[k];
        let l = &self.layout;
        let load = |tape: &mut Tape<T>, id: ParamId| tape.param(id, &net.params[id.0]);
        let conv_bn = |tape: &mut Tape<T>, x: Var, cb: ConvBn, stride: usize| -> Result<Var> {
            let w = load(tape, cb.w);
            let k = net.params[cb.w.0].shape()[2];
            let y = tape.conv2d(x, w, stride, k / 2)?;
            let gamma = load(tape, cb.gamma);
            let beta = load(tape, cb.beta);
            tape.batchnorm(y, gamma, beta)
        };

        let input = tape.leaf(images.clone());
        let mut x = conv_bn(tape, input, l.stem, 1)?;
        for (s, stage) in l.cells.iter().enumerate() {
            if s > 0 {
                let r = tape.relu_uncaptured(x)?;
                x = conv_bn(tape, r, l.reductions[s - 1], 2)?;
            }
            for cell in stage {
                let mut nodes: Vec<Option<Var>> = vec![None; self.space.num_nodes];
                nodes[0] = Some(x);
                for to in 1..self.space.num_nodes {
                    let mut acc: Option<Var> = None;
                    for (j, e) in self.space.edges.iter().enumerate().filter(|(_, e)| e.to == to) {
                        let op = &e.candidates[subnet.choices[j]];
                        let src = nodes[e.from].expect("topological edge order");
                        let out = match op.flops_model {
                            FlopsModel::None => continue,
                            FlopsModel::Skip => src,
                            FlopsModel::Pool => tape.avgpool3x3(src)?,
                            FlopsModel::Conv => {
                                let cb = cell[j][subnet.choices[j]].expect("conv ops have weights");
                                let r = tape.relu(src)?;
                                conv_bn(tape, r, cb, 1)?
                            }
                        };
                        acc = Some(match acc {
                            None => out,
                            Some(a) => tape.add(a, out)?,
                        });
                    }
                    nodes[to] = Some(match acc {
                        Some(v) => v,
                        None => {
                            let shape = tape.value(x).shape().to_vec();
                            tape.leaf(Tensor::zeros(&shape))
                        }
                    });
                }
                x = nodes[self.space.num_nodes - 1].expect("output node");
            }
        }
        let pooled = tape.global_avgpool(x)?;
        let fw = load(tape, l.fc_w);
        let fb = load(tape, l.fc_b);
        tape.linear(pooled, fw, fb)
    }

    /// Exact parameter counts over all K supernets.
    pub fn total_params(&self) -> ParamCounts {
        let mut one = ParamCounts::default();
        for (shape, kind) in self.layout.shapes.iter().zip(&self.layout.kinds) {
            let n: u64 = shape.iter().product::<usize>() as u64;
            match kind {
                ParamKind::OpWeight => one.op_weights += n,
                ParamKind::FixedWeight => one.fixed_weights += n,
                ParamKind::BnAffine => one.bn_affine += n,
                ParamKind::Bias => one.biases += n,
            }
        }
        let k = self.k() as u64;
        ParamCounts {
            op_weights: one.op_weights * k,
            fixed_weights: one.fixed_weights * k,
            bn_affine: one.bn_affine * k,
            biases: one.biases * k,
        }
    }

    /// Id of the conv weight for `op` at `edge` of cell `repeat` in `stage`.
    pub fn op_weight_id(&self, stage: usize, repeat: usize, edge: usize, op: usize) -> Option<ParamId> {
        self.layout.cells[stage][repeat][edge][op].map(|cb| cb.w)
    }
}

fn short(h: &str) -> &str {
    &h[..h.len().min(12)]
}

const MAGIC: &[u8; 8] = b"FSNASCKP";
const VERSION: u32 = 1;

fn dtype_code<T: Real>() -> u32 {
    if T::NAME == "f64" {
        1
    } else {
        0
    }
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }
}

impl<T: Real> SupernetStore<T> {
    /// Binary checkpoint, little-endian:
    ///
    /// ```text
    /// magic "FSNASCKP" | version u32 | dtype u32 (0 f32, 1 f64) | G u32 | K u32
    /// | hash_len u32 | partition hash (ascii hex) | seed u64 | step u64 | epoch u64
    /// | K x updates u64 | blob count u32
    /// | blobs: name_len u32, name, ndim u32, dims u32..., values
    /// ```
    ///
    /// Blob names are `k{k}/{param}` for weights and `k{k}/{param}#v` for momentum.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        for v in [VERSION, dtype_code::<T>(), self.g as u32, self.k() as u32, self.partition_hash.len() as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(self.partition_hash.as_bytes());
        for v in [self.seed, self.step, self.epoch] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for n in &self.nets {
            out.extend_from_slice(&n.updates.to_le_bytes());
        }
        out.extend_from_slice(&((2 * self.k() * self.layout.len()) as u32).to_le_bytes());
        for (k, net) in self.nets.iter().enumerate() {
            for (suffix, tensors) in [("", &net.params), ("#v", &net.velocity)] {
                for (name, t) in self.layout.names.iter().zip(tensors) {
                    let full = format!("k{k}/{name}{suffix}");
                    out.extend_from_slice(&(full.len() as u32).to_le_bytes());
                    out.extend_from_slice(full.as_bytes());
                    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
                    for &d in t.shape() {
                        out.extend_from_slice(&(d as u32).to_le_bytes());
                    }
                    for v in t.data() {
                        let x = v.to_f64().unwrap_or(f64::NAN);
                        if dtype_code::<T>() == 1 {
                            out.extend_from_slice(&x.to_le_bytes());
                        } else {
                            out.extend_from_slice(&(x as f32).to_le_bytes());
                        }
                    }
                }
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    /// Load a checkpoint written for `space`; the layout must match exactly.
    pub fn load(path: &Path, space: &SearchSpace) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = Reader { inner: std::io::BufReader::new(f) };
        if r.bytes(8)? != MAGIC {
            return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let dtype = r.u32()?;
        if dtype != dtype_code::<T>() {
            return Err(Error::Checkpoint(format!("checkpoint dtype {dtype} does not match {}", T::NAME)));
        }
        let g = r.u32()? as usize;
        let k = r.u32()? as usize;
        let hash_len = r.u32()? as usize;
        let partition_hash = String::from_utf8(r.bytes(hash_len)?)
            .map_err(|_| Error::Checkpoint("partition hash is not utf-8".into()))?;
        let seed = r.u64()?;
        let step = r.u64()?;
        let epoch = r.u64()?;
        let mut store = Self::init_raw(space, k, g, seed, partition_hash)?;
        store.step = step;
        store.epoch = epoch;
        for net in &mut store.nets {
            net.updates = r.u64()?;
        }
        let blobs = r.u32()? as usize;
        if blobs != 2 * k * store.layout.len() {
            return Err(Error::Checkpoint(format!("expected {} blobs, found {blobs}", 2 * k * store.layout.len())));
        }
        for kk in 0..k {
            for suffix in ["", "#v"] {
                for p in 0..store.layout.len() {
                    let expected = format!("k{kk}/{}{suffix}", store.layout.names[p]);
                    let name_len = r.u32()? as usize;
                    let name = String::from_utf8(r.bytes(name_len)?)
                        .map_err(|_| Error::Checkpoint("blob name is not utf-8".into()))?;
                    if name != expected {
                        return Err(Error::Checkpoint(format!("blob '{name}' where '{expected}' was expected")));
                    }
                    let ndim = r.u32()? as usize;
                    let dims = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
                    if dims != store.layout.shapes[p] {
                        return Err(Error::Checkpoint(format!("blob '{name}' has shape {dims:?}")));
                    }
                    let n: usize = dims.iter().product();
                    let width = if dtype == 1 { 8 } else { 4 };
                    let raw = r.bytes(n * width)?;
                    let data = raw
                        .chunks_exact(width)
                        .map(|c| {
                            if dtype == 1 {
                                T::of(f64::from_le_bytes(c.try_into().expect("8 bytes")))
                            } else {
                                T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                            }
                        })
                        .collect();
                    let t = Tensor::new(dims, data)?;
                    let net = &mut store.nets[kk];
                    if suffix.is_empty() {
                        net.params[p] = t;
                    } else {
                        net.velocity[p] = t;
                    }
                }
            }
        }
        Ok(store)
    }
}

/// Linear-regions probe: a fixed full-width network and a fixed Gaussian probe batch.
pub struct LinearRegionProbe {
    store: SupernetStore<f32>,
    batch: Tensor<f32>,
}

impl LinearRegionProbe {
    pub fn new(space: &SearchSpace, spec: ProbeSpec) -> Result<Self> {
        if spec.samples == 0 {
            return Err(Error::Config("probe batch needs at least one sample".into()));
        }
        let store = SupernetStore::init_raw(space, 1, 1, seed::derive(spec.seed, "probe-net"), String::new())?;
        let mut rng = seed::rng(seed::derive(spec.seed, "probe-batch"));
        let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
        let [c, h, w] = space.input_shape;
        let batch = Tensor::from_fn(&[spec.samples, c, h, w], |_| normal.sample(&mut rng));
        Ok(LinearRegionProbe { store, batch })
    }
}

impl ProbeEngine for LinearRegionProbe {
    fn linear_regions(&self, space: &SearchSpace, subnet: &Subnet) -> Result<usize> {
        if space != self.store.space() {
            return Err(Error::Config("probe was built for a different space".into()));
        }
        let mut tape = Tape::new(false);
        self.store.forward_unchecked(&mut tape, subnet, 0, &self.batch)?;
        let patterns = tape.activation_patterns();
        if patterns.is_empty() {
            return Ok(1);
        }
        Ok(patterns.into_iter().collect::<HashSet<_>>().len())
    }
}
