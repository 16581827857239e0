//! Shared representation of a partial layout: a stacked bidirectional GRU over
//! object tokens, a small conv net over the rasterized prefix, and a fused
//! projection of the two.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{bigru, BiGruLayer, Conv2dSpec, Linear, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::layout::{rasterize_batch, LayoutObject};

const KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub gru_layers: usize,
    pub gru_hidden: usize,
    pub conv_layers: usize,
    pub conv_channels: usize,
    pub raster_res: usize,
    /// Width of the spatial branch after its projection.
    pub spatial_width: usize,
}

impl EncoderConfig {
    /// Widths used for the published experiments.
    pub fn paper() -> Self {
        EncoderConfig {
            gru_layers: 2,
            gru_hidden: 128,
            conv_layers: 5,
            conv_channels: 16,
            raster_res: 32,
            spatial_width: 128,
        }
    }

    /// Same topology, narrow enough to train on a laptop CPU.
    pub fn desk() -> Self {
        EncoderConfig {
            gru_layers: 2,
            gru_hidden: 32,
            conv_layers: 2,
            conv_channels: 8,
            raster_res: 16,
            spatial_width: 32,
        }
    }

    pub fn layout_width(&self) -> usize {
        2 * self.gru_hidden
    }

    pub fn shared_width(&self) -> usize {
        self.layout_width() + self.spatial_width
    }

    /// Side of the feature map after the conv stack (one halving per odd layer).
    pub fn pooled_res(&self) -> usize {
        (0..self.conv_layers)
            .filter(|l| l % 2 == 1)
            .fold(self.raster_res, |r, _| r / 2)
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("gru_layers", self.gru_layers),
            ("gru_hidden", self.gru_hidden),
            ("conv_layers", self.conv_layers),
            ("conv_channels", self.conv_channels),
            ("raster_res", self.raster_res),
            ("spatial_width", self.spatial_width),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("encoder.{name} must be positive")));
        }
        if self.pooled_res() == 0 {
            return Err(Error::Config(format!(
                "raster_res {} too small for {} conv layers",
                self.raster_res, self.conv_layers
            )));
        }
        Ok(())
    }
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Debug, Clone)]
struct ConvLayer {
    kernel: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub num_categories: usize,
    start: ParamId,
    gru: Vec<BiGruLayer>,
    conv: Vec<ConvLayer>,
    spatial_proj: Linear,
    fuse: Linear,
}

/// Encoder outputs for one batch; `shared` feeds every prediction head.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub layout: Var,
    pub spatial: Var,
    pub shared: Var,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: EncoderConfig,
        num_categories: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        if num_categories == 0 {
            return Err(Error::Config("empty category vocabulary".into()));
        }
        let token = num_categories + 4;
        let start = store.weight(format!("{name}.start"), &[1, token], token, rng)?;

        let mut gru = Vec::with_capacity(config.gru_layers);
        for l in 0..config.gru_layers {
            let input = if l == 0 { token } else { config.layout_width() };
            gru.push(BiGruLayer::new(
                store,
                &format!("{name}.gru{l}"),
                input,
                config.gru_hidden,
                rng,
            )?);
        }

        let mut conv = Vec::with_capacity(config.conv_layers);
        for l in 0..config.conv_layers {
            let ci = if l == 0 { num_categories } else { config.conv_channels };
            let co = config.conv_channels;
            conv.push(ConvLayer {
                kernel: store.weight(
                    format!("{name}.conv{l}.k"),
                    &[co, ci, KERNEL, KERNEL],
                    ci * KERNEL * KERNEL,
                    rng,
                )?,
                bias: store.zeros(format!("{name}.conv{l}.b"), &[co])?,
            });
        }
        let flat = config.conv_channels * config.pooled_res() * config.pooled_res();
        let spatial_proj =
            Linear::new(store, &format!("{name}.spatial"), flat, config.spatial_width, rng)?;
        let fuse = Linear::new(
            store,
            &format!("{name}.fuse"),
            config.shared_width(),
            config.shared_width(),
            rng,
        )?;
        Ok(Encoder {
            config,
            num_categories,
            start,
            gru,
            conv,
            spatial_proj,
            fuse,
        })
    }

    pub fn shared_width(&self) -> usize {
        self.config.shared_width()
    }

    fn token_row(&self, o: &LayoutObject, row: &mut [f64]) {
        row[o.category] = 1.0;
        row[self.num_categories..].copy_from_slice(&o.bbox);
    }

    /// `X_layout` for prefixes that all share one length; `[B, 2H]`.
    pub fn encode_sequence(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        prefixes: &[&[LayoutObject]],
    ) -> Result<Var> {
        let b = prefixes.len();
        let len = self.check_batch(prefixes)?;
        let token = self.num_categories + 4;

        let mut seq = Vec::with_capacity(len.max(1));
        if len == 0 {
            let ones = tape.leaf(Tensor::ones(&[b, 1]));
            let start = tape.param(store, self.start);
            seq.push(tape.matmul(ones, start)?);
        } else {
            for t in 0..len {
                let mut m = Tensor::zeros(&[b, token]);
                for (r, p) in prefixes.iter().enumerate() {
                    self.token_row(&p[t], &mut m.data_mut()[r * token..(r + 1) * token]);
                }
                seq.push(tape.leaf(m));
            }
        }

        let mut states = None;
        for layer in &self.gru {
            let s = bigru(tape, store, layer, &seq)?;
            seq = s.concat_steps(tape)?;
            states = Some(s);
        }
        let s = states.expect("at least one recurrent layer");
        let last = *s.forward.last().expect("non-empty sequence");
        tape.concat(&[last, s.backward[0]], 1)
    }

    /// `X_spatial`; `[B, spatial_width]`.
    pub fn encode_spatial(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        prefixes: &[&[LayoutObject]],
    ) -> Result<Var> {
        let b = prefixes.len();
        if b == 0 {
            return Err(Error::Empty("empty encoder batch"));
        }
        let mut x = tape.leaf(rasterize_batch(
            prefixes,
            self.num_categories,
            self.config.raster_res,
        ));
        for (l, layer) in self.conv.iter().enumerate() {
            let k = tape.param(store, layer.kernel);
            let bias = tape.param(store, layer.bias);
            x = tape.conv2d(x, k, Conv2dSpec::same(KERNEL))?;
            x = tape.add_bias(x, bias, 1)?;
            x = tape.relu(x);
            if l % 2 == 1 {
                x = tape.avg_pool2(x)?;
            }
        }
        let r = self.config.pooled_res();
        let flat = tape.reshape(x, &[b, self.config.conv_channels * r * r])?;
        self.spatial_proj.forward(tape, store, flat)
    }

    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        prefixes: &[&[LayoutObject]],
    ) -> Result<Encoded> {
        let layout = self.encode_sequence(tape, store, prefixes)?;
        let spatial = self.encode_spatial(tape, store, prefixes)?;
        let joined = tape.concat(&[layout, spatial], 1)?;
        let fused = self.fuse.forward(tape, store, joined)?;
        let shared = tape.relu(fused);
        Ok(Encoded {
            layout,
            spatial,
            shared,
        })
    }

    fn check_batch(&self, prefixes: &[&[LayoutObject]]) -> Result<usize> {
        let first = prefixes.first().ok_or(Error::Empty("empty encoder batch"))?;
        let len = first.len();
        for p in prefixes {
            if p.len() != len {
                return Err(Error::shape("encode", &[len], &[p.len()]));
            }
            if let Some(o) = p.iter().find(|o| o.category >= self.num_categories) {
                return Err(Error::CategoryIndex {
                    index: o.category,
                    len: self.num_categories,
                });
            }
        }
        Ok(len)
    }
}
