//! The assembled reconstruction model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aligner::{
    bidirectional_cross_attention, cross_attention, fuse_and_concat, init_aligner, patchify_project, single_modality_memory, flatten_project,
    AlignedMemory, AlignerConfig, TokenSet,
};
use crate::baselines::ZRParams;
use crate::decoder::{causal_attend, encode_query, fuse_boundary, init_decoder, predict_rain, CausalPrior, DecoderDims, Proximity, QueryPoint};
use crate::encoders::{
    aws_encode, convlstm_forward, init_aws_encoder, init_convlstm, init_radar_encoder, interpolate_virtual_nodes, laplacian_boundaries, radar_encode,
    radar_input, AwsDims, NodeInputs, RadarDims,
};
use crate::error::{Error, Result};
use crate::geo::{knn_adjacency, GridGeoref, RadarSequence, RainField, StationSeries};
use crate::nn::{Ctx, ParamStore};

use super::config::TrainConfig;

/// One input window: radar frames and visible-station series over the same
/// steps, the last of which is the target step.
#[derive(Clone, Debug)]
pub struct Window {
    pub radar: RadarSequence,
    pub gauges: StationSeries,
}

/// Graph outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `[Q, 1]` predictions in the normalized rain domain.
    pub pred: crate::autograd::Var,
    pub prior: CausalPrior,
}

/// Model parameters plus everything needed to rebuild the forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct RainSeer {
    pub config: TrainConfig,
    pub georef: GridGeoref,
    /// Number of visible (input) stations the node tables were sized for.
    pub stations: usize,
    pub params: ParamStore,
}

impl RainSeer {
    /// Fresh parameters drawn from the configured seed.
    pub fn new(config: TrainConfig, georef: GridGeoref, stations: usize) -> Result<Self> {
        config.validate()?;
        georef.validate()?;
        let m = &config.model;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let radar_dims = RadarDims {
            channels: m.radar_channels,
            temporal_kernel: m.temporal_kernel,
            max_steps: config.window,
        };
        init_radar_encoder(&mut params, "radar", radar_dims, georef.height, georef.width, &mut rng);
        init_convlstm(&mut params, "rfe", m.boundary_channels, m.convlstm_kernel, &mut rng);
        let aws_dims = AwsDims {
            dim: m.dim,
            max_steps: config.window,
            nodes: stations + m.virtual_nodes,
            layers: m.aws_layers,
        };
        init_aws_encoder(&mut params, "aws", aws_dims, &mut rng);
        init_aligner(&mut params, "align", m.radar_channels, m.dim, aligner_config(&config), &mut rng);
        let dec = DecoderDims {
            dim: 2 * m.dim,
            max_steps: config.window,
            boundary_channels: m.boundary_channels,
        };
        init_decoder(&mut params, "dec", dec, &mut rng);
        Ok(Self {
            config,
            georef,
            stations,
            params,
        })
    }

    fn virtual_nodes(&self) -> usize {
        let a = &self.config.ablation;
        if a.no_radar || a.no_aws {
            0
        } else {
            self.config.model.virtual_nodes
        }
    }

    /// Checks that a window matches the grid and station count.
    pub fn check_window(&self, w: &Window) -> Result<()> {
        if w.radar.georef != self.georef {
            return Err(Error::Config("radar grid differs from the model grid".into()));
        }
        if w.gauges.len() != self.stations {
            return Err(Error::Config(format!(
                "model expects {} input stations, got {}",
                self.stations,
                w.gauges.len()
            )));
        }
        let steps = w.radar.steps();
        if steps == 0 || steps > self.config.window || w.gauges.steps != steps {
            return Err(Error::Shape(format!(
                "window of {steps} radar and {} gauge steps; expected 1..={} of each",
                w.gauges.steps, self.config.window
            )));
        }
        Ok(())
    }

    /// Gauge nodes fed to the graph encoder: visible stations then virtual
    /// nodes read off the window's radar.
    pub fn node_inputs(&self, w: &Window) -> NodeInputs {
        let mut series = w.gauges.clone();
        let v = self.virtual_nodes();
        if v > 0 {
            series.extend(&interpolate_virtual_nodes(&w.radar, v, self.config.seed, ZRParams::default()));
        }
        let scaling = self.config.model.scaling;
        NodeInputs::from_series(&series, |r| scaling.forward(r))
    }

    /// Encoders, aligner and decoder for `queries` at the window's last step.
    pub fn forward(&self, ctx: &mut Ctx, w: &Window, queries: &[QueryPoint]) -> Result<Forward> {
        self.check_window(w)?;
        let cfg = &self.config;
        let m = &cfg.model;
        let a = cfg.ablation;
        let steps = w.radar.steps();
        let ts: Vec<f64> = (0..steps).map(|t| t as f64).collect();
        let t_q = (steps - 1) as f64;

        let radar_tokens = if a.no_radar {
            None
        } else {
            let x = radar_input(ctx, &w.radar, m.radar_scale);
            let feat = radar_encode(ctx, x, "radar")?;
            Some(patchify_project(ctx, feat, m.patch, &self.georef, &ts, "align")?)
        };
        let boundary = if a.no_radar || a.no_rfe {
            None
        } else {
            let b = laplacian_boundaries(&w.radar)?;
            let bf = convlstm_forward(ctx, &b, m.boundary_scale, "rfe")?;
            bf.states.last().copied()
        };
        let aws_tokens = if a.no_aws {
            None
        } else {
            let inputs = self.node_inputs(w);
            let n = inputs.nodes();
            if n < 2 {
                return Err(Error::Domain(format!("the gauge graph needs at least 2 nodes, got {n}")));
            }
            let adj = knn_adjacency(&inputs.coords, cfg.k.min(n - 1))?;
            let nodes = aws_encode(ctx, &inputs, &adj, m.aws_layers, "aws")?;
            Some(flatten_project(ctx, &nodes, &ts, "align")?)
        };
        let mem = self.memory(ctx, radar_tokens.as_ref(), aws_tokens.as_ref())?;

        let q_loc = encode_query(ctx, queries, &self.georef, steps - 1, "dec")?;
        let qq = match boundary {
            Some(hb) => fuse_boundary(ctx, q_loc, hb, queries, &self.georef, m.fuse_radius, "dec")?,
            None => {
                let h = ctx.linear(q_loc, "dec.qq1");
                let h = ctx.g.elu(h);
                ctx.linear(h, "dec.qq2")
            }
        };
        let near = Proximity {
            queries,
            georef: &self.georef,
        };
        let prior = causal_attend(ctx, qq, &mem, t_q, Some(near), a.no_csta_geo, "dec")?;
        let pred = predict_rain(ctx, &prior, qq, "dec");
        Ok(Forward { pred, prior })
    }

    fn memory(&self, ctx: &mut Ctx, radar: Option<&TokenSet>, aws: Option<&TokenSet>) -> Result<AlignedMemory> {
        let acfg = aligner_config(&self.config);
        match (radar, aws) {
            (Some(r), Some(s)) if self.config.ablation.no_bpa_bidir => {
                let (e_sr, _) = cross_attention(ctx, s, r, &self.georef, acfg, "align.sr")?;
                let e_rs = ctx.constant(crate::autograd::Tensor::zeros(ctx.g.shape(r.tokens).to_vec()));
                Ok(fuse_and_concat(ctx, r, s, e_rs, e_sr))
            }
            (Some(r), Some(s)) => {
                let (e_rs, e_sr) = bidirectional_cross_attention(ctx, r, s, &self.georef, acfg, "align")?;
                Ok(fuse_and_concat(ctx, r, s, e_rs, e_sr))
            }
            (Some(t), None) | (None, Some(t)) => Ok(single_modality_memory(ctx, t)),
            (None, None) => Err(Error::Config("every input branch is ablated".into())),
        }
    }

    /// The window of up to `config.window` steps ending at `t_q`.
    pub fn window_at(&self, radar: &RadarSequence, gauges: &StationSeries, t_q: usize) -> Result<Window> {
        if t_q >= radar.steps() || t_q >= gauges.steps {
            return Err(Error::Domain(format!(
                "target step {t_q} beyond the {} available steps",
                radar.steps().min(gauges.steps)
            )));
        }
        let start = (t_q + 1).saturating_sub(self.config.window);
        Ok(Window {
            radar: radar.slice_steps(start..t_q + 1),
            gauges: gauges.slice_steps(start..t_q + 1),
        })
    }

    /// Predicted rain (mm/h) at `points` for step `t_q`, using only steps up
    /// to and including `t_q`.
    pub fn predict_points(&self, radar: &RadarSequence, gauges: &StationSeries, t_q: usize, points: &[(f64, f64)]) -> Result<Vec<f64>> {
        let w = self.window_at(radar, gauges, t_q)?;
        let t = (w.radar.steps() - 1) as f64;
        let queries: Vec<QueryPoint> = points.iter().map(|&(x, y)| QueryPoint { x, y, t_q: t }).collect();
        let mut ctx = Ctx::inference(&self.params);
        let f = self.forward(&mut ctx, &w, &queries)?;
        let scaling = self.config.model.scaling;
        Ok(ctx.value(f.pred).data().iter().map(|&v| scaling.inverse(v).max(0.0)).collect())
    }

    /// The mm/h field at step `t_q`, one query per cell center.
    pub fn reconstruct(&self, radar: &RadarSequence, gauges: &StationSeries, t_q: usize) -> Result<RainField> {
        let g = self.georef;
        let centers: Vec<(f64, f64)> = (0..g.height)
            .flat_map(|r| (0..g.width).map(move |c| g.cell_center(r, c)))
            .collect();
        let values = self.predict_points(radar, gauges, t_q, &centers)?;
        RainField::new(values, g)
    }
}

pub(crate) fn aligner_config(cfg: &TrainConfig) -> AlignerConfig {
    AlignerConfig {
        patch: cfg.model.patch,
        heads: cfg.model.heads,
        distance_bias: cfg.model.distance_bias,
    }
}
