//! Cell-based search spaces.
//!
//! A space is a DAG cell whose edges each pick one candidate operation. Node 0
//! receives the cell input, every other node sums its incoming edges, and the
//! last node is the cell output. Cells are stacked `cell_repeats` times per
//! stage, with a stride-2 reduction block between stages:
//!
//! ```text
//! stem (conv3x3 + BN) -> [cell x R] -> reduce -> [cell x R] -> ... -> GAP -> linear
//! ```
//!
//! Subnets are encoded in mixed radix over edge arities with edge 0 as the
//! least significant digit, edges taken in declaration order.
//!
//! Cost convention: one multiply-accumulate is 2 FLOPs; BN, ReLU, pooling and
//! skip cost nothing. Parameter counts cover conv and linear weights only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FLOPS_CONVENTION: &str =
    "flops: 1 multiply-accumulate = 2 FLOPs; BN, ReLU, pooling, skip and none cost 0; params count conv+linear weights";

/// Cost formula selector for an operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopsModel {
    /// ReLU -> conv(s x s) -> BN.
    Conv,
    /// 3x3 average pooling, stride 1.
    Pool,
    /// Identity.
    Skip,
    /// Zero tensor.
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OpSpec {
    pub name: String,
    pub kernel_size: usize,
    pub nonlinearity_count: u32,
    pub has_weights: bool,
    pub flops_model: FlopsModel,
}

impl OpSpec {
    pub fn none() -> Self {
        Self::plain("none", FlopsModel::None)
    }

    pub fn skip() -> Self {
        Self::plain("skip_connect", FlopsModel::Skip)
    }

    pub fn avg_pool_3x3() -> Self {
        Self::plain("avg_pool_3x3", FlopsModel::Pool)
    }

    pub fn relu_conv_bn(kernel_size: usize) -> Self {
        OpSpec {
            name: format!("nor_conv_{kernel_size}x{kernel_size}"),
            kernel_size,
            nonlinearity_count: 1,
            has_weights: true,
            flops_model: FlopsModel::Conv,
        }
    }

    fn plain(name: &str, flops_model: FlopsModel) -> Self {
        OpSpec {
            name: name.to_string(),
            kernel_size: 0,
            nonlinearity_count: 0,
            has_weights: false,
            flops_model,
        }
    }

    /// Look up one of the NAS-Bench-201 operation names.
    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "none" => Some(Self::none()),
            "skip_connect" => Some(Self::skip()),
            "avg_pool_3x3" => Some(Self::avg_pool_3x3()),
            "nor_conv_1x1" => Some(Self::relu_conv_bn(1)),
            "nor_conv_3x3" => Some(Self::relu_conv_bn(3)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Validation(format!("op '{}': {msg}", self.name)));
        match self.flops_model {
            FlopsModel::Conv => {
                if !self.has_weights || self.kernel_size == 0 {
                    return bad("conv ops carry weights with kernel_size >= 1");
                }
                if self.kernel_size % 2 == 0 {
                    return bad("kernel_size must be odd");
                }
                if self.nonlinearity_count == 0 {
                    return bad("ReLU-conv-BN ops apply at least one nonlinearity");
                }
            }
            FlopsModel::Pool | FlopsModel::Skip | FlopsModel::None => {
                if self.has_weights || self.kernel_size != 0 {
                    return bad("weightless ops have kernel_size 0");
                }
                if self.nonlinearity_count != 0 {
                    return bad("skip/none/pool ops have no nonlinearity");
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub candidates: Vec<OpSpec>,
}

impl Edge {
    pub fn arity(&self) -> usize {
        self.candidates.len()
    }
}

/// One architecture: an operation index per edge.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Subnet {
    pub choices: Vec<usize>,
}

impl Subnet {
    pub fn new(choices: Vec<usize>) -> Self {
        Subnet { choices }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StructMetrics {
    pub nonlinearity_count: u32,
    pub flops: u64,
    pub params: u64,
}

/// Constraint metric for search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMetric {
    Flops,
    Params,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SearchSpace {
    pub name: String,
    pub num_nodes: usize,
    pub edges: Vec<Edge>,
    pub cell_repeats: usize,
    pub channel_plan: Vec<usize>,
    /// (channels, height, width)
    pub input_shape: [usize; 3],
    pub num_classes: usize,
}

/// Spatial extent of a stage plus its base width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// Output size of a conv/pool window.
pub fn conv_out(size: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (size + 2 * padding - kernel) / stride + 1
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Validation(format!("space '{}': {msg}", self.name)));
        if self.edges.is_empty() {
            return bad("no edges".into());
        }
        if self.num_nodes < 2 {
            return bad("a cell needs at least 2 nodes".into());
        }
        let mut has_input = vec![false; self.num_nodes];
        for (j, e) in self.edges.iter().enumerate() {
            if e.candidates.len() < 2 {
                return bad(format!("edge {j} has {} candidates, need >= 2", e.candidates.len()));
            }
            if e.from >= e.to || e.to >= self.num_nodes {
                return bad(format!("edge {j} ({} -> {}) is not a forward edge", e.from, e.to));
            }
            has_input[e.to] = true;
            for op in &e.candidates {
                op.validate()?;
            }
        }
        if let Some(n) = (1..self.num_nodes).find(|&n| !has_input[n]) {
            return bad(format!("node {n} has no incoming edge"));
        }
        if self.cell_repeats == 0 {
            return bad("cell_repeats must be positive".into());
        }
        if self.channel_plan.is_empty() || self.channel_plan.contains(&0) {
            return bad("channel_plan needs positive widths".into());
        }
        if self.input_shape.contains(&0) {
            return bad("input_shape needs positive dimensions".into());
        }
        if self.num_classes < 2 {
            return bad("num_classes must be >= 2".into());
        }
        self.size()?;
        Ok(())
    }

    /// Total number of subnets (product of edge arities).
    pub fn size(&self) -> Result<u64> {
        self.edges.iter().try_fold(1u64, |acc, e| {
            acc.checked_mul(e.arity() as u64)
                .ok_or_else(|| Error::Validation("search space size overflows u64".into()))
        })
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn check_subnet(&self, subnet: &Subnet) -> Result<()> {
        if subnet.choices.len() != self.edges.len() {
            return Err(Error::Validation(format!(
                "subnet has {} choices, space has {} edges",
                subnet.choices.len(),
                self.edges.len()
            )));
        }
        for (j, (&c, e)) in subnet.choices.iter().zip(&self.edges).enumerate() {
            if c >= e.arity() {
                return Err(Error::Validation(format!(
                    "choice {c} at edge {j} exceeds {} candidates",
                    e.arity()
                )));
            }
        }
        Ok(())
    }

    pub fn encode(&self, subnet: &Subnet) -> Result<u64> {
        self.check_subnet(subnet)?;
        let mut code = 0u64;
        for (c, e) in subnet.choices.iter().zip(&self.edges).rev() {
            code = code * e.arity() as u64 + *c as u64;
        }
        Ok(code)
    }

    pub fn decode(&self, code: u64) -> Result<Subnet> {
        let n = self.size()?;
        if code >= n {
            return Err(Error::Range { what: "encoding", value: code, bound: n });
        }
        let mut rest = code;
        let choices = self
            .edges
            .iter()
            .map(|e| {
                let a = e.arity() as u64;
                let c = rest % a;
                rest /= a;
                c as usize
            })
            .collect();
        Ok(Subnet { choices })
    }

    /// All subnets in encoding order. Refuses spaces larger than `limit`.
    pub fn enumerate(&self, limit: u64) -> Result<impl Iterator<Item = Subnet> + '_> {
        let n = self.size()?;
        if n > limit {
            return Err(Error::TooLarge { size: n, limit });
        }
        Ok(SubnetIter { space: self, current: Some(vec![0; self.edges.len()]) })
    }

    pub fn ops<'a>(&'a self, subnet: &'a Subnet) -> impl Iterator<Item = &'a OpSpec> + 'a {
        subnet.choices.iter().zip(&self.edges).map(|(&c, e)| &e.candidates[c])
    }

    pub fn op_names(&self, subnet: &Subnet) -> Vec<String> {
        self.ops(subnet).map(|op| op.name.clone()).collect()
    }

    /// ReLU applications inside one cell.
    pub fn count_nonlinearities(&self, subnet: &Subnet) -> Result<u32> {
        self.check_subnet(subnet)?;
        Ok(self.ops(subnet).map(|op| op.nonlinearity_count).sum())
    }

    pub fn check_divisor(&self, g: usize) -> Result<()> {
        if g == 0 {
            return Err(Error::Validation("channel divisor G must be >= 1".into()));
        }
        if let Some(w) = self.channel_plan.iter().find(|&&w| w % g != 0) {
            return Err(Error::Config(format!(
                "channel width {w} is not divisible by G = {g}"
            )));
        }
        Ok(())
    }

    pub fn stage_geometry(&self) -> Vec<StageGeometry> {
        let [_, mut h, mut w] = self.input_shape;
        self.channel_plan
            .iter()
            .enumerate()
            .map(|(s, &c)| {
                if s > 0 {
                    h = conv_out(h, 3, 2, 1);
                    w = conv_out(w, 3, 2, 1);
                }
                StageGeometry { channels: c, height: h, width: w }
            })
            .collect()
    }

    fn op_cost(op: &OpSpec, channels: usize, hw: usize) -> (u64, u64) {
        match op.flops_model {
            FlopsModel::Conv => {
                let w = (channels * channels * op.kernel_size * op.kernel_size) as u64;
                (2 * w * hw as u64, w)
            }
            FlopsModel::Pool | FlopsModel::Skip | FlopsModel::None => (0, 0),
        }
    }

    /// FLOPs and weights of the searchable cells only, at divisor `g`.
    pub fn cell_cost(&self, subnet: &Subnet, g: usize) -> Result<(u64, u64)> {
        self.check_subnet(subnet)?;
        self.check_divisor(g)?;
        let mut flops = 0u64;
        let mut params = 0u64;
        for geo in self.stage_geometry() {
            let c = geo.channels / g;
            let hw = geo.height * geo.width;
            for op in self.ops(subnet) {
                let (f, p) = Self::op_cost(op, c, hw);
                flops += f * self.cell_repeats as u64;
                params += p * self.cell_repeats as u64;
            }
        }
        Ok((flops, params))
    }

    /// FLOPs and weights of the fixed macro skeleton (stem, reductions, classifier).
    pub fn fixed_cost(&self, g: usize) -> Result<(u64, u64)> {
        self.check_divisor(g)?;
        let geo = self.stage_geometry();
        let in_c = self.input_shape[0];
        let c0 = geo[0].channels / g;
        let stem_w = (c0 * in_c * 9) as u64;
        let mut flops = 2 * stem_w * (geo[0].height * geo[0].width) as u64;
        let mut params = stem_w;
        for pair in geo.windows(2) {
            let w = ((pair[1].channels / g) * (pair[0].channels / g) * 9) as u64;
            flops += 2 * w * (pair[1].height * pair[1].width) as u64;
            params += w;
        }
        let last = geo.last().expect("validated channel plan");
        let fc = ((last.channels / g) * self.num_classes) as u64;
        flops += 2 * fc;
        params += fc;
        Ok((flops, params))
    }

    /// Total FLOPs of the subnet at divisor `g`, stem and classifier included.
    pub fn flops(&self, subnet: &Subnet, g: usize) -> Result<u64> {
        Ok(self.cell_cost(subnet, g)?.0 + self.fixed_cost(g)?.0)
    }

    /// Cell FLOPs only.
    pub fn cell_flops(&self, subnet: &Subnet, g: usize) -> Result<u64> {
        Ok(self.cell_cost(subnet, g)?.0)
    }

    /// Total conv+linear weights at divisor `g`.
    pub fn param_count(&self, subnet: &Subnet, g: usize) -> Result<u64> {
        Ok(self.cell_cost(subnet, g)?.1 + self.fixed_cost(g)?.1)
    }

    /// Weights of the chosen cell operations only.
    pub fn cell_params(&self, subnet: &Subnet, g: usize) -> Result<u64> {
        Ok(self.cell_cost(subnet, g)?.1)
    }

    pub fn metrics(&self, subnet: &Subnet, g: usize) -> Result<StructMetrics> {
        Ok(StructMetrics {
            nonlinearity_count: self.count_nonlinearities(subnet)?,
            flops: self.flops(subnet, g)?,
            params: self.param_count(subnet, g)?,
        })
    }

    pub fn cost(&self, subnet: &Subnet, metric: CostMetric) -> Result<u64> {
        match metric {
            CostMetric::Flops => self.flops(subnet, 1),
            CostMetric::Params => self.param_count(subnet, 1),
        }
    }

    pub fn random_subnet<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Subnet {
        Subnet {
            choices: self.edges.iter().map(|e| rng.random_range(0..e.arity())).collect(),
        }
    }

    /// Parse a NAS-Bench-201 architecture string such as
    /// `|nor_conv_3x3~0|+|none~0|skip_connect~1|+|...|`.
    pub fn parse_arch_string(&self, arch: &str) -> Result<Subnet> {
        let mut found: Vec<Option<usize>> = vec![None; self.edges.len()];
        for (node_idx, node) in arch.split('+').enumerate() {
            let to = node_idx + 1;
            for tok in node.split('|').filter(|t| !t.is_empty()) {
                let (name, from) = tok
                    .split_once('~')
                    .ok_or_else(|| Error::Validation(format!("bad arch token '{tok}'")))?;
                let from: usize = from
                    .parse()
                    .map_err(|_| Error::Validation(format!("bad input node in '{tok}'")))?;
                let j = self
                    .edges
                    .iter()
                    .position(|e| e.from == from && e.to == to)
                    .ok_or_else(|| Error::Validation(format!("no edge {from} -> {to}")))?;
                let c = self.edges[j]
                    .candidates
                    .iter()
                    .position(|op| op.name == name)
                    .ok_or_else(|| Error::Validation(format!("unknown op '{name}' at edge {j}")))?;
                found[j] = Some(c);
            }
        }
        let choices = found
            .into_iter()
            .enumerate()
            .map(|(j, c)| c.ok_or_else(|| Error::Validation(format!("edge {j} missing from arch string"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Subnet { choices })
    }

    pub fn arch_string(&self, subnet: &Subnet) -> Result<String> {
        self.check_subnet(subnet)?;
        let mut parts = Vec::new();
        for to in 1..self.num_nodes {
            let mut s = String::from("|");
            for (j, e) in self.edges.iter().enumerate().filter(|(_, e)| e.to == to) {
                s.push_str(&format!("{}~{}|", e.candidates[subnet.choices[j]].name, e.from));
            }
            parts.push(s);
        }
        Ok(parts.join("+"))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let def: SpaceDef =
            toml::from_str(text).map_err(|e| Error::Config(format!("space definition: {e}")))?;
        def.build()
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Load a bundled space by name, or a definition file by path.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        match name_or_path {
            "nas201" => Self::from_toml_str(NAS201_TOML),
            "desk27" => Self::from_toml_str(DESK27_TOML),
            path if std::path::Path::new(path).is_file() => Self::load(std::path::Path::new(path)),
            other => Err(Error::Usage(format!("unknown space {other:?}: not a builtin (nas201, desk27) or a file"))),
        }
    }

    pub fn nas201() -> Self {
        Self::from_toml_str(NAS201_TOML).expect("bundled space is valid")
    }

    pub fn desk27() -> Self {
        Self::from_toml_str(DESK27_TOML).expect("bundled space is valid")
    }
}

pub const NAS201_TOML: &str = include_str!("../assets/nas201.toml");
pub const DESK27_TOML: &str = include_str!("../assets/desk27.toml");

struct SubnetIter<'a> {
    space: &'a SearchSpace,
    current: Option<Vec<usize>>,
}

impl Iterator for SubnetIter<'_> {
    type Item = Subnet;

    fn next(&mut self) -> Option<Subnet> {
        let cur = self.current.take()?;
        let mut next = cur.clone();
        // Increment the mixed-radix counter, least significant edge first.
        let mut carry = true;
        for (d, e) in next.iter_mut().zip(&self.space.edges) {
            *d += 1;
            if *d < e.arity() {
                carry = false;
                break;
            }
            *d = 0;
        }
        if !carry {
            self.current = Some(next);
        }
        Some(Subnet { choices: cur })
    }
}

/// On-disk form of a search space.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpaceDef {
    name: String,
    num_nodes: usize,
    cell_repeats: usize,
    channel_plan: Vec<usize>,
    input_shape: [usize; 3],
    num_classes: usize,
    /// Default candidate list for edges that do not override it.
    #[serde(default)]
    ops: Vec<String>,
    /// Custom operations beyond the built-in names.
    #[serde(default)]
    op_defs: Vec<OpSpec>,
    edges: Vec<EdgeDef>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeDef {
    from: usize,
    to: usize,
    #[serde(default)]
    ops: Option<Vec<String>>,
}

impl SpaceDef {
    fn lookup(&self, name: &str) -> Result<OpSpec> {
        self.op_defs
            .iter()
            .find(|op| op.name == name)
            .cloned()
            .or_else(|| OpSpec::builtin(name))
            .ok_or_else(|| Error::Config(format!("unknown operation '{name}'")))
    }

    fn build(self) -> Result<SearchSpace> {
        let edges = self
            .edges
            .iter()
            .map(|e| {
                let names = e.ops.as_ref().unwrap_or(&self.ops);
                let candidates = names.iter().map(|n| self.lookup(n)).collect::<Result<_>>()?;
                Ok(Edge { from: e.from, to: e.to, candidates })
            })
            .collect::<Result<Vec<_>>>()?;
        let space = SearchSpace {
            name: self.name,
            num_nodes: self.num_nodes,
            edges,
            cell_repeats: self.cell_repeats,
            channel_plan: self.channel_plan,
            input_shape: self.input_shape,
            num_classes: self.num_classes,
        };
        space.validate()?;
        Ok(space)
    }
}
