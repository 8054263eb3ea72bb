//! Toy convolutional encoder producing gridded multi-scale features, and
//! the positional encoding added before the transformer.

use std::f64::consts::PI;

use rand::Rng;

use crate::config::{ModelConfig, ENCODER_STAGES, ENCODER_STRIDE};
use crate::error::{Error, Result};
use crate::numerics::{Conv2d, GroupNorm, ParamId, ParamStore, Tape, Tensor, Var};

/// One scale of gridded features, `[E×s×s]`.
#[derive(Clone, Copy, Debug)]
pub struct FeatureGrid<'t> {
    pub scale_index: usize,
    pub side: usize,
    pub channels: usize,
    pub data: Var<'t>,
}

/// Grids ordered finest first: scale indices increase, sides decrease.
#[derive(Clone, Debug)]
pub struct PyramidFeatures<'t> {
    pub grids: Vec<FeatureGrid<'t>>,
}

impl<'t> PyramidFeatures<'t> {
    pub fn new(grids: Vec<FeatureGrid<'t>>) -> Result<Self> {
        if grids
            .windows(2)
            .any(|w| w[0].scale_index >= w[1].scale_index || w[0].side <= w[1].side)
        {
            return Err(Error::Config(
                "pyramid grids must have increasing scale index and decreasing side".into(),
            ));
        }
        for g in &grids {
            let shape = g.data.shape();
            if shape != [g.channels, g.side, g.side] {
                return Err(Error::dim("feature grid", &shape, &[g.channels, g.side, g.side]));
            }
        }
        Ok(Self { grids })
    }

    /// Wraps raw `[E×s×s]` tensors, one per scale in order.
    pub fn from_vars(vars: &[Var<'t>]) -> Result<Self> {
        let grids = vars
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let s = v.shape();
                if s.len() != 3 || s[1] != s[2] {
                    return Err(Error::dim("feature grid", &s, &[0, 0, 0]));
                }
                Ok(FeatureGrid {
                    scale_index: i,
                    side: s[1],
                    channels: s[0],
                    data: v,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(grids)
    }

    pub fn vars(&self) -> Vec<Var<'t>> {
        self.grids.iter().map(|g| g.data).collect()
    }

    pub fn sides(&self) -> Vec<usize> {
        self.grids.iter().map(|g| g.side).collect()
    }

    pub fn len(&self) -> usize {
        self.grids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grids.is_empty()
    }

    /// Replaces the data of every grid, checking that shapes are unchanged.
    pub fn with_vars(&self, vars: Vec<Var<'t>>) -> Result<Self> {
        if vars.len() != self.grids.len() {
            return Err(Error::Alignment {
                what: "pyramid scales",
                left: self.grids.len(),
                right: vars.len(),
            });
        }
        let grids = self
            .grids
            .iter()
            .zip(vars)
            .map(|(g, data)| FeatureGrid { data, ..*g })
            .collect();
        Self::new(grids)
    }
}

pub struct EncoderOutput<'t> {
    pub pyramid: PyramidFeatures<'t>,
    /// Feature map after each stride-2 stage, finest first.
    pub stages: Vec<Var<'t>>,
}

/// Four stride-2 `conv3×3 → GN → ReLU` stages with a 1×1 lateral per scale.
#[derive(Clone, Debug)]
pub struct Encoder {
    stages: Vec<(Conv2d, GroupNorm)>,
    laterals: Vec<Conv2d>,
    stage_of_scale: Vec<usize>,
    sides: Vec<usize>,
    channels: usize,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let widths = Self::stage_widths(cfg);
        let mut stages = Vec::with_capacity(ENCODER_STAGES);
        let mut c_in = 3;
        for (i, &w) in widths.iter().enumerate() {
            let conv = Conv2d::new(store, &format!("encoder.stage{i}.conv"), c_in, w, 3, 2, false, rng);
            let gn = GroupNorm::new(store, &format!("encoder.stage{i}.gn"), w, cfg.gn_groups)?;
            stages.push((conv, gn));
            c_in = w;
        }
        let s = cfg.grid_sides.len();
        let stage_of_scale: Vec<usize> = (0..s)
            .map(|i| if s == 1 { ENCODER_STAGES - 1 } else { 1 + i * 2 / (s - 1) })
            .collect();
        let laterals = stage_of_scale
            .iter()
            .enumerate()
            .map(|(i, &st)| {
                Conv2d::new(store, &format!("encoder.lateral{i}"), widths[st], cfg.channels, 1, 1, false, rng)
            })
            .collect();
        Ok(Self {
            stages,
            laterals,
            stage_of_scale,
            sides: cfg.grid_sides.clone(),
            channels: cfg.channels,
        })
    }

    pub fn stage_widths(cfg: &ModelConfig) -> [usize; ENCODER_STAGES] {
        [cfg.encoder_width, cfg.encoder_width, cfg.channels, cfg.channels]
    }

    pub fn encode<'t>(&self, tape: &'t Tape, store: &ParamStore, image: Var<'t>) -> Result<EncoderOutput<'t>> {
        let shape = image.shape();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::dim("encode", &shape, &[3, 0, 0]));
        }
        if !shape[1].is_multiple_of(ENCODER_STRIDE) || !shape[2].is_multiple_of(ENCODER_STRIDE) {
            return Err(Error::Config(format!(
                "image size {}x{} is not divisible by the encoder stride {ENCODER_STRIDE}",
                shape[1], shape[2]
            )));
        }
        let mut x = image;
        let mut stages = Vec::with_capacity(self.stages.len());
        for (conv, gn) in &self.stages {
            x = gn.forward(tape, store, conv.forward(tape, store, x)?)?.relu();
            stages.push(x);
        }
        let grids = self
            .laterals
            .iter()
            .zip(&self.stage_of_scale)
            .zip(&self.sides)
            .enumerate()
            .map(|(i, ((lat, &st), &side))| {
                let data = lat.forward(tape, store, stages[st])?.interpolate((side, side))?;
                Ok(FeatureGrid {
                    scale_index: i,
                    side,
                    channels: self.channels,
                    data,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EncoderOutput {
            pyramid: PyramidFeatures::new(grids)?,
            stages,
        })
    }
}

/// Fixed 2-D sinusoid: the first `E/2` channels encode the column index, the
/// rest the row index. Channel `c` of a half uses wavelength
/// `10^(4c/(E/2-1))` cells (geometric from 1 to 10⁴), sine on even `c`,
/// cosine on odd `c`.
pub fn sinusoid_table(side: usize, channels: usize) -> Result<Tensor> {
    if channels == 0 || !channels.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "positional encoding needs an even channel count, got {channels}"
        )));
    }
    let half = channels / 2;
    let wavelength = |c: usize| {
        if half == 1 {
            1.0
        } else {
            10f64.powf(4.0 * c as f64 / (half - 1) as f64)
        }
    };
    let wave = |c: usize, pos: usize| {
        let phase = 2.0 * PI * pos as f64 / wavelength(c);
        if c.is_multiple_of(2) {
            phase.sin()
        } else {
            phase.cos()
        }
    };
    Ok(Tensor::from_fn(&[channels, side, side], |i| {
        let ch = i / (side * side);
        let y = (i / side) % side;
        let x = i % side;
        if ch < half {
            wave(ch, x)
        } else {
            wave(ch - half, y)
        }
    }))
}

/// Sinusoid plus a learned bias vector per scale.
#[derive(Clone, Debug)]
pub struct PositionalEncoding {
    biases: Vec<ParamId>,
    tables: Vec<Tensor>,
}

impl PositionalEncoding {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let tables = cfg
            .grid_sides
            .iter()
            .map(|&s| sinusoid_table(s, cfg.channels))
            .collect::<Result<Vec<_>>>()?;
        let biases = (0..cfg.grid_sides.len())
            .map(|i| store.register(format!("pos.bias{i}"), Tensor::zeros(&[cfg.channels])))
            .collect();
        Ok(Self { biases, tables })
    }

    pub fn apply<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        p: &PyramidFeatures<'t>,
    ) -> Result<PyramidFeatures<'t>> {
        if p.len() != self.tables.len() {
            return Err(Error::Alignment {
                what: "positional encoding scales",
                left: self.tables.len(),
                right: p.len(),
            });
        }
        let vars = p
            .grids
            .iter()
            .zip(&self.tables)
            .zip(&self.biases)
            .map(|((g, table), &bias)| {
                if g.data.shape() != table.shape() {
                    return Err(Error::dim("positional encoding", &g.data.shape(), table.shape()));
                }
                g.data
                    .add(tape.constant(table.clone()))?
                    .add_channel_bias(tape.param(store, bias))
            })
            .collect::<Result<Vec<_>>>()?;
        p.with_vars(vars)
    }
}
