//! The MCAN network family: configuration, presets, graph construction and
//! staged evaluation.

pub mod graph;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{ConvSpec, Tensor};
use crate::weights::WeightStore;
use crate::{Error, Result};
use graph::{ExecStats, Graph, GraphBuilder, GraphError, NodeId};

pub use graph::{Extent, Node, Op};

/// Upscaling factors with a reconstruction tail.
pub const SUPPORTED_SCALES: [usize; 3] = [2, 3, 4];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SigmoidVariant {
    Standard,
    /// `x / (1 + |x|)`, applied verbatim as the attention gate.
    Fast,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Mcan,
    McanM,
    McanS,
    McanT,
    McanFast,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::Mcan,
        Preset::McanM,
        Preset::McanS,
        Preset::McanT,
        Preset::McanFast,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Mcan => "MCAN",
            Preset::McanM => "MCAN-M",
            Preset::McanS => "MCAN-S",
            Preset::McanT => "MCAN-T",
            Preset::McanFast => "MCAN-FAST",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown model `{s}` (expected one of MCAN, MCAN-M, MCAN-S, MCAN-T, MCAN-FAST)"
                ))
            })
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    /// Scale used by [`Model::forward`].
    pub scale: usize,
    /// Scales that get a reconstruction tail. Always contains `scale`.
    pub tail_scales: Vec<usize>,
    pub d: usize,
    pub k: usize,
    pub m: usize,
    pub n_fe: (usize, usize),
    pub n_mim: usize,
    pub n_eff: (usize, usize),
    /// Width of the last convolution before upsampling.
    pub n_l: usize,
    pub reduction: usize,
    pub rcab_groups: usize,
    pub sigmoid: SigmoidVariant,
    pub mim_connections: bool,
    pub eff_enabled: bool,
}

impl ModelConfig {
    pub fn preset(preset: Preset, scale: usize) -> Result<Self> {
        let (n_fe, n_mim, n_l, reduction, groups) = match preset {
            Preset::Mcan | Preset::McanFast => ((64, 32), 32, 256, 8, 1),
            Preset::McanM => ((64, 24), 24, 128, 8, 1),
            Preset::McanS => ((32, 16), 16, 64, 8, 1),
            // n_l = 8 falls well short of the target model size; 24 matches it.
            Preset::McanT => ((16, 8), 8, 24, 4, 4),
        };
        let cfg = Self {
            scale,
            tail_scales: SUPPORTED_SCALES.to_vec(),
            d: 3,
            k: 3,
            m: 3,
            n_fe,
            n_mim,
            n_eff: (3 * n_mim, n_mim),
            n_l,
            reduction,
            rcab_groups: groups,
            sigmoid: if preset == Preset::McanFast {
                SigmoidVariant::Fast
            } else {
                SigmoidVariant::Standard
            },
            mim_connections: true,
            eff_enabled: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Looks a preset up by its display name.
    pub fn named(name: &str, scale: usize) -> Result<Self> {
        Self::preset(name.parse()?, scale)
    }

    /// Channels per upsampling stage.
    pub fn upsample_width(&self) -> usize {
        self.n_l / 4
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !SUPPORTED_SCALES.contains(&self.scale) {
            return bad(format!("scale {} not in {{2, 3, 4}}", self.scale));
        }
        if let Some(s) = self.tail_scales.iter().find(|s| !SUPPORTED_SCALES.contains(s)) {
            return bad(format!("tail scale {s} not in {{2, 3, 4}}"));
        }
        if !self.tail_scales.contains(&self.scale) {
            return bad(format!("no tail for scale {}", self.scale));
        }
        if self.d == 0 || self.k == 0 || self.m == 0 {
            return bad("D, K and M must be at least 1".into());
        }
        if self.n_fe.0 == 0 || self.n_mim == 0 || self.n_eff.0 == 0 {
            return bad("channel widths must be positive".into());
        }
        if self.n_fe.1 != self.n_mim {
            return bad(format!(
                "second FE width {} must equal n_mim {}",
                self.n_fe.1, self.n_mim
            ));
        }
        if self.n_eff.1 != self.n_mim {
            return bad(format!(
                "second EFF width {} must equal n_mim {}",
                self.n_eff.1, self.n_mim
            ));
        }
        if self.eff_enabled && self.n_eff.0 != self.d * self.n_mim {
            return bad(format!(
                "first EFF width {} must equal D * n_mim = {}",
                self.n_eff.0,
                self.d * self.n_mim
            ));
        }
        if self.reduction == 0 || self.n_mim % self.reduction != 0 {
            return bad(format!(
                "n_mim {} not divisible by reduction {}",
                self.n_mim, self.reduction
            ));
        }
        if self.rcab_groups == 0 || self.n_mim % self.rcab_groups != 0 {
            return bad(format!(
                "n_mim {} not divisible by {} groups",
                self.n_mim, self.rcab_groups
            ));
        }
        if self.n_l < 4 || self.n_l % 4 != 0 {
            return bad(format!("n_l {} must be a positive multiple of 4", self.n_l));
        }
        Ok(())
    }
}

/// Node ids of one residual channel attention block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RcabNodes {
    pub input: NodeId,
    /// Output of the second 3x3 conv, before attention.
    pub body: NodeId,
    pub gate: NodeId,
    pub output: NodeId,
}

/// Node ids of one multi-connected block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct McabNodes {
    /// External inputs in the order [`Model::mcab_forward`] expects them.
    pub inputs: Vec<NodeId>,
    /// The `M + 1` fusion conv outputs.
    pub fusions: Vec<NodeId>,
    pub rcabs: Vec<RcabNodes>,
}

impl McabNodes {
    pub fn output(&self) -> NodeId {
        *self.fusions.last().expect("an MCAB has at least two fusions")
    }
}

/// Node ids of one cell (a row of `K` blocks).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellNodes {
    pub heads_in: Vec<NodeId>,
    pub mcabs: Vec<McabNodes>,
    pub heads_out: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TailNodes {
    pub scale: usize,
    pub skip: NodeId,
    pub output: NodeId,
}

/// Where each stage boundary lives in the graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub input: NodeId,
    pub f0: NodeId,
    pub cells: Vec<CellNodes>,
    /// Last block output of every cell.
    pub edges: Vec<NodeId>,
    pub eff_out: NodeId,
    /// `F_EFF + F_0`, shared by every tail.
    pub body_sum: NodeId,
    pub tails: Vec<TailNodes>,
}

impl Layout {
    pub fn tail(&self, scale: usize) -> Option<&TailNodes> {
        self.tails.iter().find(|t| t.scale == scale)
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub graph: Graph,
    pub layout: Layout,
    pub weights: WeightStore,
}

fn g(e: GraphError) -> Error {
    Error::Graph(e)
}

struct Builder<'a> {
    b: GraphBuilder,
    cfg: &'a ModelConfig,
}

impl Builder<'_> {
    fn conv(&mut self, name: &str, x: NodeId, spec: ConvSpec) -> Result<NodeId> {
        self.b.conv(name, x, spec).map_err(g)
    }

    fn rcab(&mut self, p: &str, x: NodeId) -> Result<RcabNodes> {
        let n = self.cfg.n_mim;
        let body = ConvSpec::same(n, n, 3).with_groups(self.cfg.rcab_groups);
        let c1 = self.conv(&format!("{p}.conv1"), x, body)?;
        let r = self.b.relu(format!("{p}.relu"), c1).map_err(g)?;
        let c2 = self.conv(&format!("{p}.conv2"), r, body)?;
        let pooled = self.b.pool(format!("{p}.pool"), c2).map_err(g)?;
        let nr = n / self.cfg.reduction;
        let down = self.conv(&format!("{p}.ca_down"), pooled, ConvSpec::same(n, nr, 1))?;
        let dr = self.b.relu(format!("{p}.ca_relu"), down).map_err(g)?;
        let up = self.conv(&format!("{p}.ca_up"), dr, ConvSpec::same(nr, n, 1))?;
        let gate = match self.cfg.sigmoid {
            SigmoidVariant::Standard => self.b.sigmoid(format!("{p}.gate"), up),
            SigmoidVariant::Fast => self.b.fast_sigmoid(format!("{p}.gate"), up),
        }
        .map_err(g)?;
        let scaled = self.b.scale_channels(format!("{p}.scale"), c2, gate).map_err(g)?;
        let output = self.b.add(format!("{p}.out"), scaled, x).map_err(g)?;
        Ok(RcabNodes {
            input: x,
            body: c2,
            gate,
            output,
        })
    }

    /// One block. `cross` holds the fusion outputs of the previous block in
    /// the same cell when cross-block connections are active.
    fn mcab(&mut self, p: &str, head: NodeId, cross: Option<&[NodeId]>) -> Result<McabNodes> {
        let mm = self.cfg.m;
        let mut inputs = vec![head];
        if let Some(c) = cross {
            inputs.extend_from_slice(c);
        }
        let mut fusions: Vec<NodeId> = Vec::with_capacity(mm + 1);
        let mut rcabs: Vec<RcabNodes> = Vec::with_capacity(mm);
        for m in 0..=mm {
            let mut parts = Vec::new();
            if m == 0 {
                parts.push(head);
                if let Some(c) = cross {
                    parts.push(c[0]);
                    parts.push(c[mm]);
                }
            } else {
                parts.push(rcabs[m - 1].output);
                if m < mm {
                    if let Some(c) = cross {
                        parts.push(c[m]);
                    }
                }
                parts.extend_from_slice(&fusions[..m]);
            }
            let cat = if parts.len() == 1 {
                parts[0]
            } else {
                self.b.concat(format!("{p}.m{m}.cat"), &parts).map_err(g)?
            };
            let width = parts.len() * self.cfg.n_mim;
            let f = self.conv(
                &format!("{p}.m{m}.fuse"),
                cat,
                ConvSpec::same(width, self.cfg.n_mim, 1),
            )?;
            fusions.push(f);
            if m < mm {
                rcabs.push(self.rcab(&format!("{p}.m{m}.rcab"), f)?);
            }
        }
        Ok(McabNodes {
            inputs,
            fusions,
            rcabs,
        })
    }

    fn tail(&mut self, s: usize, x: NodeId, input: NodeId) -> Result<TailNodes> {
        let c = self.cfg.upsample_width();
        let stages: &[usize] = match s {
            2 => &[2],
            3 => &[3],
            _ => &[2, 2],
        };
        let mut cur = x;
        for (j, &f) in stages.iter().enumerate() {
            let cin = self.b.channels(cur);
            let up = self.conv(
                &format!("tail.x{s}.up{j}"),
                cur,
                ConvSpec::same(cin, c * f * f, 3),
            )?;
            let r = self.b.relu(format!("tail.x{s}.up{j}.relu"), up).map_err(g)?;
            cur = self
                .b
                .pixel_shuffle(format!("tail.x{s}.up{j}.shuffle"), r, f)
                .map_err(g)?;
        }
        let exit = self.conv(&format!("tail.x{s}.exit"), cur, ConvSpec::same(c, 3, 3))?;
        let skip = self.b.bilinear(format!("tail.x{s}.skip"), input, s).map_err(g)?;
        let output = self.b.add(format!("tail.x{s}.out"), exit, skip).map_err(g)?;
        Ok(TailNodes {
            scale: s,
            skip,
            output,
        })
    }
}

impl Model {
    /// Builds the graph and draws every parameter from `U(-k, k)` with
    /// `k = 1 / sqrt(fan_in)`, `fan_in = (c_in / groups) * kh * kw`, in graph
    /// order, weight before bias.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        let (graph, layout) = build_graph(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = WeightStore::new();
        for (_, node, spec) in graph.convs() {
            let fan_in = spec.in_channels / spec.groups * spec.kernel.0 * spec.kernel.1;
            let bound = 1.0 / (fan_in as f32).sqrt();
            let mut draw = |shape: [usize; 4]| {
                let len = shape.iter().product();
                let data = (0..len).map(|_| rng.gen_range(-bound..bound)).collect();
                Tensor::new(shape, data).expect("shape and length agree")
            };
            let w = draw(spec.weight_shape());
            weights.insert(format!("{}.weight", node.name), w);
            if spec.has_bias {
                let b = draw(spec.bias_shape());
                weights.insert(format!("{}.bias", node.name), b);
            }
        }
        Ok(Self {
            config,
            graph,
            layout,
            weights,
        })
    }

    /// A model with every parameter set to zero.
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        let mut m = Self::build(config, 0)?;
        m.weights.zero_all();
        Ok(m)
    }

    fn run(
        &self,
        seeds: Vec<(NodeId, Tensor)>,
        targets: &[NodeId],
    ) -> Result<(Vec<Tensor>, ExecStats)> {
        let mut ev = self
            .graph
            .evaluate(&self.weights, seeds, targets, false)
            .map_err(g)?;
        let mut out = Vec::with_capacity(targets.len());
        for &t in targets {
            let v = match ev.value(t) {
                // the same node may be requested twice
                Some(v) if targets.iter().filter(|&&x| x == t).count() > 1 => v.clone(),
                Some(_) => ev.take(t).expect("value present"),
                None => return Err(g(GraphError::MissingValue(self.graph.node(t).name.clone()))),
            };
            out.push(v);
        }
        Ok((out, ev.stats))
    }

    fn run_one(&self, seeds: Vec<(NodeId, Tensor)>, target: NodeId) -> Result<Tensor> {
        Ok(self.run(seeds, &[target])?.0.remove(0))
    }

    fn check_channels(&self, what: &str, t: &Tensor, expected: usize) -> Result<()> {
        if t.c() != expected {
            return Err(Error::Invalid(format!(
                "{what}: expected {expected} channels, got {}",
                t.c()
            )));
        }
        Ok(())
    }

    fn check_arity(&self, what: &str, got: usize, expected: usize) -> Result<()> {
        if got != expected {
            return Err(Error::Invalid(format!(
                "{what}: expected {expected} inputs, got {got}"
            )));
        }
        Ok(())
    }

    /// `F_0`: two 3x3 convolutions with a ReLU between them.
    pub fn feature_extract(&self, lr: &Tensor) -> Result<Tensor> {
        self.check_channels("feature_extract", lr, 3)?;
        self.run_one(vec![(self.layout.input, lr.clone())], self.layout.f0)
    }

    /// One RCAB, addressed by cell, block and position.
    pub fn rcab_forward(&self, d: usize, k: usize, m: usize, x: &Tensor) -> Result<Tensor> {
        let r = self.rcab_nodes(d, k, m)?;
        self.check_channels("rcab_forward", x, self.config.n_mim)?;
        self.run_one(vec![(r.input, x.clone())], r.output)
    }

    pub fn rcab_nodes(&self, d: usize, k: usize, m: usize) -> Result<&RcabNodes> {
        self.mcab_nodes(d, k)?
            .rcabs
            .get(m)
            .ok_or_else(|| Error::Invalid(format!("no RCAB at m = {m}")))
    }

    pub fn mcab_nodes(&self, d: usize, k: usize) -> Result<&McabNodes> {
        self.layout
            .cells
            .get(d)
            .and_then(|c| c.mcabs.get(k))
            .ok_or_else(|| Error::Invalid(format!("no block at d = {d}, k = {k}")))
    }

    /// Runs block `(d, k)` on its external inputs (see [`McabNodes::inputs`])
    /// and returns all `M + 1` fusion outputs.
    pub fn mcab_forward(&self, d: usize, k: usize, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
        let nodes = self.mcab_nodes(d, k)?;
        self.check_arity("mcab_forward", inputs.len(), nodes.inputs.len())?;
        let mut seeds = Vec::new();
        for (&id, t) in nodes.inputs.iter().zip(inputs) {
            self.check_channels("mcab_forward", t, self.config.n_mim)?;
            seeds.push((id, t.clone()));
        }
        Ok(self.run(seeds, &nodes.fusions)?.0)
    }

    /// Runs cell `d` on its `K` incoming heads and returns its `K` outputs.
    pub fn mcac_forward(&self, d: usize, heads: &[Tensor]) -> Result<Vec<Tensor>> {
        let cell = self
            .layout
            .cells
            .get(d)
            .ok_or_else(|| Error::Invalid(format!("no cell at d = {d}")))?;
        self.check_arity("mcac_forward", heads.len(), self.config.k)?;
        let mut seeds = Vec::new();
        for (&id, t) in cell.heads_in.iter().zip(heads) {
            self.check_channels("mcac_forward", t, self.config.n_mim)?;
            seeds.push((id, t.clone()));
        }
        Ok(self.run(seeds, &cell.heads_out)?.0)
    }

    /// Chains all cells from `F_0` and returns the `D` edge features.
    pub fn mim_forward(&self, f0: &Tensor) -> Result<Vec<Tensor>> {
        self.check_channels("mim_forward", f0, self.config.n_mim)?;
        Ok(self.run(vec![(self.layout.f0, f0.clone())], &self.layout.edges)?.0)
    }

    pub fn eff_forward(&self, edges: &[Tensor]) -> Result<Tensor> {
        self.check_arity("eff_forward", edges.len(), self.config.d)?;
        if !self.config.eff_enabled {
            let last = edges.last().expect("D >= 1");
            self.check_channels("eff_forward", last, self.config.n_mim)?;
            return Ok(last.clone());
        }
        let mut seeds = Vec::new();
        for (&id, t) in self.layout.edges.iter().zip(edges) {
            self.check_channels("eff_forward", t, self.config.n_mim)?;
            seeds.push((id, t.clone()));
        }
        self.run_one(seeds, self.layout.eff_out)
    }

    /// `H_UP(F_EFF + F_0) + bilinear(I_LR)` at the configured scale.
    pub fn reconstruct(&self, f_eff: &Tensor, f0: &Tensor, lr: &Tensor) -> Result<Tensor> {
        self.reconstruct_at(f_eff, f0, lr, self.config.scale)
    }

    pub fn reconstruct_at(
        &self,
        f_eff: &Tensor,
        f0: &Tensor,
        lr: &Tensor,
        scale: usize,
    ) -> Result<Tensor> {
        let tail = self.tail_nodes(scale)?;
        if f_eff.shape() != f0.shape() {
            return Err(Error::Invalid(format!(
                "reconstruct: F_EFF {:?} and F_0 {:?} differ",
                f_eff.shape(),
                f0.shape()
            )));
        }
        self.check_channels("reconstruct", f0, self.config.n_mim)?;
        self.check_channels("reconstruct", lr, 3)?;
        let sum = crate::tensor::add(f_eff, f0)?;
        let seeds = vec![(self.layout.body_sum, sum), (self.layout.input, lr.clone())];
        self.run_one(seeds, tail.output)
    }

    pub fn tail_nodes(&self, scale: usize) -> Result<&TailNodes> {
        self.layout
            .tail(scale)
            .ok_or_else(|| Error::Config(format!("model has no tail for scale {scale}")))
    }

    pub fn forward(&self, lr: &Tensor) -> Result<Tensor> {
        self.forward_at(lr, self.config.scale)
    }

    pub fn forward_at(&self, lr: &Tensor, scale: usize) -> Result<Tensor> {
        Ok(self.forward_traced(lr, scale)?.0)
    }

    /// Forward pass that also reports execution counters.
    pub fn forward_traced(&self, lr: &Tensor, scale: usize) -> Result<(Tensor, ExecStats)> {
        self.check_channels("forward", lr, 3)?;
        let tail = self.tail_nodes(scale)?;
        let (mut out, stats) = self.run(vec![(self.layout.input, lr.clone())], &[tail.output])?;
        Ok((out.remove(0), stats))
    }
}

fn build_graph(cfg: &ModelConfig) -> Result<(Graph, Layout)> {
    cfg.validate()?;
    let mut bld = Builder {
        b: GraphBuilder::new(),
        cfg,
    };
    let input = bld.b.input("input", 3).map_err(g)?;
    let fe1 = bld.conv("fe.conv1", input, ConvSpec::same(3, cfg.n_fe.0, 3))?;
    let fe1r = bld.b.relu("fe.relu", fe1).map_err(g)?;
    let f0 = bld.conv("fe.conv2", fe1r, ConvSpec::same(cfg.n_fe.0, cfg.n_fe.1, 3))?;

    let mut heads: Vec<NodeId> = (0..cfg.k)
        .map(|k| bld.b.identity(format!("mim.d0.head{k}"), f0))
        .collect::<std::result::Result<_, _>>()
        .map_err(g)?;
    let mut cells = Vec::with_capacity(cfg.d);
    for d in 0..cfg.d {
        let mut mcabs: Vec<McabNodes> = Vec::with_capacity(cfg.k);
        for k in 0..cfg.k {
            let p = format!("mim.d{d}.k{k}");
            let blk = if cfg.mim_connections {
                let cross = if k > 0 {
                    Some(mcabs[k - 1].fusions.clone())
                } else {
                    None
                };
                bld.mcab(&p, heads[k], cross.as_deref())?
            } else {
                // plain chain: each block feeds only the next one
                let head = if k == 0 {
                    heads[cfg.k - 1]
                } else {
                    mcabs[k - 1].output()
                };
                bld.mcab(&p, head, None)?
            };
            mcabs.push(blk);
        }
        let heads_out: Vec<NodeId> = mcabs.iter().map(McabNodes::output).collect();
        cells.push(CellNodes {
            heads_in: heads.clone(),
            mcabs,
            heads_out: heads_out.clone(),
        });
        heads = heads_out;
    }
    let edges: Vec<NodeId> = cells.iter().map(|c| c.heads_out[cfg.k - 1]).collect();

    let eff_out = if cfg.eff_enabled {
        let cat = if edges.len() == 1 {
            edges[0]
        } else {
            bld.b.concat("eff.cat", &edges).map_err(g)?
        };
        let fuse = bld.conv(
            "eff.fuse",
            cat,
            ConvSpec::same(cfg.d * cfg.n_mim, cfg.n_eff.0, 3),
        )?;
        let r = bld.b.relu("eff.relu", fuse).map_err(g)?;
        bld.conv("eff.reduce", r, ConvSpec::same(cfg.n_eff.0, cfg.n_eff.1, 3))?
    } else {
        *edges.last().expect("D >= 1")
    };
    let body_sum = bld.b.add("body.sum", eff_out, f0).map_err(g)?;

    let mut scales = cfg.tail_scales.clone();
    scales.sort_unstable();
    scales.dedup();
    let tails = scales
        .into_iter()
        .map(|s| bld.tail(s, body_sum, input))
        .collect::<Result<Vec<_>>>()?;

    let layout = Layout {
        input,
        f0,
        cells,
        edges,
        eff_out,
        body_sum,
        tails,
    };
    Ok((bld.b.finish(), layout))
}
