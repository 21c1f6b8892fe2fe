//! Encoder–decoder generator joined by nested dense skip pathways.
//!
//! Nodes `x[i, j]` sit at level `i` (spatial size `input_size / 2^i`) and
//! column `j`. Column 0 is the encoder: `x[i, 0] = H(x[i-1, 0])`, with
//! `x[0, 0]` reading the image. Every node with `j > 0` concatenates all
//! same-level predecessors `x[i, 0..j]` with the upsampled `x[i+1, j-1]` and
//! applies one convolution block `H`. The reconstruction head reads
//! `x[0, L]`.

use anomgan_tensor::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Bound, Builder, ConvBlock, ConvSpec, ParamStore, Resample, Upsampling};

/// Hard ceiling on per-level channel counts.
pub const MAX_CHANNELS: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Side of the square input patch; a power of two.
    pub input_size: usize,
    pub input_channels: usize,
    /// Number of down levels `L`.
    pub depth: usize,
    /// Channels at level 0; doubled per level up to [`MAX_CHANNELS`].
    pub base_channels: usize,
    /// Channels at the bottleneck level `L`.
    pub latent_dim: usize,
    pub upsampling: Upsampling,
    pub spectral_norm: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            input_size: 256,
            input_channels: 3,
            depth: 4,
            base_channels: 64,
            latent_dim: 512,
            upsampling: Upsampling::Nearest,
            spectral_norm: true,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.input_size.is_power_of_two() {
            return Err(Error::Config(format!(
                "generator input_size {} is not a power of two",
                self.input_size
            )));
        }
        if self.depth == 0 {
            return Err(Error::Config("generator depth must be at least 1".into()));
        }
        if self.input_size >> self.depth < 4 {
            return Err(Error::Config(format!(
                "generator bottleneck {}px below 4px (input {}, depth {})",
                self.input_size >> self.depth,
                self.input_size,
                self.depth
            )));
        }
        if !matches!(self.input_channels, 1 | 3) {
            return Err(Error::Config(format!(
                "input_channels must be 1 or 3, got {}",
                self.input_channels
            )));
        }
        if self.base_channels == 0 || self.latent_dim == 0 {
            return Err(Error::Config("generator channel counts must be positive".into()));
        }
        if self.base_channels > MAX_CHANNELS || self.latent_dim > MAX_CHANNELS {
            return Err(Error::Config(format!(
                "generator channels capped at {MAX_CHANNELS}"
            )));
        }
        Ok(())
    }

    /// Channel count of every node at `level`.
    pub fn channels(&self, level: usize) -> usize {
        if level == self.depth {
            self.latent_dim
        } else {
            (self.base_channels << level).min(MAX_CHANNELS)
        }
    }

    pub fn spatial(&self, level: usize) -> usize {
        self.input_size >> level
    }

    /// Input channels of node `(i, j)`: one predecessor for `j = 0`,
    /// otherwise `j` same-level maps plus one upsampled map from below.
    pub fn node_in_channels(&self, level: usize, column: usize) -> usize {
        match (level, column) {
            (0, 0) => self.input_channels,
            (i, 0) => self.channels(i - 1),
            (i, j) => j * self.channels(i) + self.channels(i + 1),
        }
    }
}

/// The triangular grid of skip-pathway nodes; `nodes[i]` holds columns
/// `0..=L-i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SkipGrid {
    depth: usize,
    nodes: Vec<Vec<ConvBlock>>,
}

impl SkipGrid {
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn node(&self, level: usize, column: usize) -> &ConvBlock {
        &self.nodes[level][column]
    }

    pub fn columns(&self, level: usize) -> usize {
        self.nodes[level].len()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.iter().map(Vec::len).sum()
    }
}

/// What a node consumed during one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeTrace {
    pub level: usize,
    pub column: usize,
    /// Number of maps concatenated into the node's input.
    pub arity: usize,
    pub in_channels: usize,
    /// Side of the node's output map.
    pub spatial: usize,
}

pub struct GeneratorOutput<'g> {
    /// `tanh` reconstruction, same shape as the input.
    pub reconstruction: Var<'g>,
    /// Bottleneck map `x[L, 0]`.
    pub latent: Var<'g>,
    pub trace: Vec<NodeTrace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    config: GeneratorConfig,
    params: ParamStore,
    grid: SkipGrid,
    head: ConvBlock,
}

fn check_finite(v: Var<'_>, location: impl FnOnce() -> String) -> Result<()> {
    if v.value().is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            location: location(),
        })
    }
}

fn spatial_of(v: Var<'_>) -> (usize, usize) {
    let s = v.shape();
    (s[2], s[3])
}

/// One `j > 0` node: `H([x[i,0], .., x[i,j-1], U(x[i+1,j-1])])`.
pub fn dense_skip_node<'g>(
    block: &ConvBlock,
    params: &Bound<'g, '_>,
    (level, column): (usize, usize),
    same_level: &[Var<'g>],
    below: Var<'g>,
) -> Result<(Var<'g>, NodeTrace)> {
    if column == 0 || same_level.len() != column {
        return Err(Error::Wiring(format!(
            "node x[{level},{column}] expects {column} same-level inputs, got {}",
            same_level.len()
        )));
    }
    let (h, w) = spatial_of(same_level[0]);
    if same_level.iter().any(|v| spatial_of(*v) != (h, w)) {
        return Err(Error::Wiring(format!(
            "node x[{level},{column}]: same-level inputs disagree on spatial size"
        )));
    }
    let (bh, bw) = spatial_of(below);
    if (2 * bh, 2 * bw) != (h, w) {
        return Err(Error::Wiring(format!(
            "node x[{level},{column}]: below input {bh}x{bw} is not half of {h}x{w}"
        )));
    }
    let mut parts = same_level.to_vec();
    parts.push(below.upsample2x(block.upsampling.into()));
    let input = Var::concat(&parts);
    let in_channels = input.dim(1);
    if in_channels != block.spec.in_channels {
        return Err(Error::Wiring(format!(
            "node x[{level},{column}]: concatenated {in_channels} channels, block expects {}",
            block.spec.in_channels
        )));
    }
    let out = block.forward(params, input);
    let trace = NodeTrace {
        level,
        column,
        arity: parts.len(),
        in_channels,
        spatial: h,
    };
    Ok((out, trace))
}

impl Generator {
    /// Allocates the grid and head with Gaussian(0, 0.02) weights drawn from `seed`.
    pub fn build(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let depth = config.depth;
        let mut params = ParamStore::new();
        let mut builder = Builder::new(&mut params, seed, config.spectral_norm);
        let mut nodes = Vec::with_capacity(depth + 1);
        for level in 0..=depth {
            let mut row = Vec::with_capacity(depth - level + 1);
            for column in 0..=depth - level {
                let resample = if level > 0 && column == 0 {
                    Resample::Down
                } else {
                    Resample::Keep
                };
                let spec = ConvSpec::new(
                    config.node_in_channels(level, column),
                    config.channels(level),
                    resample,
                    Activation::Relu,
                );
                row.push(ConvBlock::build(
                    &mut builder,
                    &format!("node{level}_{column}"),
                    spec,
                    config.upsampling,
                )?);
            }
            nodes.push(row);
        }
        let head = ConvBlock::build(
            &mut builder,
            "head",
            ConvSpec::new(
                config.channels(0),
                config.input_channels,
                Resample::Keep,
                Activation::Tanh,
            ),
            config.upsampling,
        )?;
        Ok(Self {
            config,
            params,
            grid: SkipGrid { depth, nodes },
            head,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn grid(&self) -> &SkipGrid {
        &self.grid
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        if shape.len() != 4
            || shape[1] != c.input_channels
            || shape[2] != c.input_size
            || shape[3] != c.input_size
        {
            return Err(Error::Shape(format!(
                "generator expects (N, {}, {}, {}), got {shape:?}",
                c.input_channels, c.input_size, c.input_size
            )));
        }
        Ok(())
    }

    /// Encoder column first, then the skip grid in increasing column order,
    /// then the `tanh` head on `x[0, L]`.
    pub fn forward<'g>(&self, params: &Bound<'g, '_>, x: Var<'g>) -> Result<GeneratorOutput<'g>> {
        self.check_input(&x.shape())?;
        let out_of_range = x.value().data().iter().any(|v| !(-1.0..=1.0).contains(v));
        if out_of_range && x.value().is_finite() {
            return Err(Error::Shape("generator input values must lie in [-1, 1]".into()));
        }
        let depth = self.config.depth;
        let mut maps: Vec<Vec<Var<'g>>> = vec![Vec::new(); depth + 1];
        let mut trace = Vec::with_capacity(self.grid.node_count());

        let mut prev = x;
        for (level, row) in maps.iter_mut().enumerate() {
            let block = self.grid.node(level, 0);
            let in_channels = prev.dim(1);
            if in_channels != block.spec.in_channels {
                return Err(Error::Wiring(format!(
                    "encoder node x[{level},0] got {in_channels} channels, expects {}",
                    block.spec.in_channels
                )));
            }
            let out = block.forward(params, prev);
            check_finite(out, || format!("generator node x[{level},0]"))?;
            trace.push(NodeTrace {
                level,
                column: 0,
                arity: 1,
                in_channels,
                spatial: spatial_of(out).0,
            });
            row.push(out);
            prev = out;
        }

        for column in 1..=depth {
            for level in 0..=depth - column {
                let below = maps[level + 1][column - 1];
                let (out, node_trace) = dense_skip_node(
                    self.grid.node(level, column),
                    params,
                    (level, column),
                    &maps[level][..column],
                    below,
                )?;
                check_finite(out, || format!("generator node x[{level},{column}]"))?;
                debug_assert_eq!(node_trace.arity, column + 1);
                trace.push(node_trace);
                maps[level].push(out);
            }
        }

        let reconstruction = self.head.forward(params, maps[0][depth]);
        check_finite(reconstruction, || "generator output head".into())?;
        Ok(GeneratorOutput {
            reconstruction,
            latent: maps[depth][0],
            trace,
        })
    }

    /// Inference-mode reconstruction of an `(N, C, S, S)` batch.
    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let bound = self.params.bind(&g, false);
        let out = self.forward(&bound, g.constant(x.clone()))?;
        let value = out.reconstruction.value();
        Ok((*value).clone())
    }
}
