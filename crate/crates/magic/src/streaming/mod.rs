//! Raster-scan execution planning and simulation.
//!
//! [`plan_schedule`] derives, per layer, the vertical delay contribution in
//! full-resolution lines and the line-buffer allocation; per skip, the
//! full-resolution span its FIFO must hold (the total delay of the path it
//! bypasses). [`StreamContext`] executes a model line by line against that
//! plan; its output is bit-identical to the whole-frame path because both
//! share the same per-row kernels.
//!
//! Delay accounting uses top-of-tile alignment: a stream at downsample
//! factor `s` nominally places its row `r` at full-resolution line `s*r`.
//! Under that convention a K-row FIR at factor `s` contributes
//! `floor(K/2)*s` lines of delay, a vertical IIR contributes none, a
//! stride-4 pool contributes `3*s` (its window must fill), and nearest
//! upsampling contributes none.

mod engine;

pub use engine::{stream_infer, SkipPrecision, StreamContext, StreamOptions};

use crate::dpcm::DpcmConfig;
use crate::error::{MagicError, Result};
use crate::topology::{ModelIr, NetworkConfig, Step};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlanKind {
    /// Fixed-window convolution (pointwise and horizontal included).
    Fir,
    /// Vertical first-order IIR; one state line, no delay.
    Iir,
    /// 4x4 stride-4 max pool.
    Pool,
    /// Nearest 4x upsampling.
    Upsample,
    /// Residual join; its FIFO spans the bypassed branch delay.
    ResidualJoin,
    /// Skip decompression and concat; the FIFO itself is a `SkipPlan`.
    SkipJoin,
}

/// Per-layer schedule entry. `delay_lines` is the contribution in
/// full-resolution lines; `lines_buffered`/`buffered_samples` describe the
/// persistent storage the layer needs at its own scale.
#[derive(Clone, Debug)]
pub struct LayerPlan {
    pub name: String,
    pub kind: PlanKind,
    pub scale: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub vertical_extent: usize,
    pub lines_buffered: usize,
    pub buffered_samples: usize,
    pub delay_lines: usize,
    /// Multiply-accumulates per output pixel at this layer's scale.
    pub macs_per_pixel: usize,
}

/// Per-skip schedule entry. The span equals the total delay of the path
/// the skip bypasses; the FIFO holds `span / scale` rows of compressed
/// samples.
#[derive(Clone, Debug)]
pub struct SkipPlan {
    pub name: String,
    pub scale: usize,
    pub channels: usize,
    pub span_lines: usize,
    pub rows_held: usize,
    pub buffered_samples: usize,
    pub dpcm: Option<DpcmConfig>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PlanTotals {
    pub fir_line_samples: usize,
    pub pool_line_samples: usize,
    pub iir_state_samples: usize,
    pub skip_fifo_samples: usize,
    pub residual_fifo_samples: usize,
    pub total_buffered_samples: usize,
    /// End-to-end latency in full-resolution lines.
    pub delay_lines: usize,
}

/// Schedule of vertical delays and line-buffer allocations for one frame
/// size.
#[derive(Clone, Debug)]
pub struct LinePlan {
    pub width: usize,
    pub height: usize,
    pub layers: Vec<LayerPlan>,
    pub skips: Vec<SkipPlan>,
    pub totals: PlanTotals,
}

impl LinePlan {
    /// Comma-separated table, one row per layer, for diffing in tests.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "name,kind,scale,in_ch,out_ch,v_extent,lines_buffered,buffered_samples,delay_lines,macs_per_pixel\n",
        );
        for l in &self.layers {
            s.push_str(&format!(
                "{},{:?},{},{},{},{},{},{},{},{}\n",
                l.name,
                l.kind,
                l.scale,
                l.in_channels,
                l.out_channels,
                l.vertical_extent,
                l.lines_buffered,
                l.buffered_samples,
                l.delay_lines,
                l.macs_per_pixel
            ));
        }
        for k in &self.skips {
            s.push_str(&format!(
                "{},SkipFifo,{},{},{},1,{},{},0,0\n",
                k.name, k.scale, k.channels, k.channels, k.rows_held, k.buffered_samples
            ));
        }
        s
    }
}

/// Tracks the trunk's scale factor and channel count while walking the
/// step sequence. Shared by the planner and the streaming compiler.
pub(crate) struct TrunkWalk<'a> {
    pub ir: &'a ModelIr,
    pub scale: usize,
    pub channels: usize,
}

impl<'a> TrunkWalk<'a> {
    pub fn new(ir: &'a ModelIr, in_channels: usize) -> Self {
        TrunkWalk { ir, scale: 1, channels: in_channels }
    }

    /// Advance past one step, returning `(in_channels, out_channels)` of the
    /// trunk around it.
    pub fn advance(&mut self, step: &Step) -> (usize, usize) {
        let cin = self.channels;
        match *step {
            Step::Conv { kernel, .. } => {
                self.channels = self.ir.params[kernel].shape[0];
            }
            Step::Pool4 => self.scale *= 4,
            Step::Upsample4 => self.scale /= 4,
            Step::JoinSkip { kernel, .. } => {
                self.channels += self.ir.params[kernel].shape[0];
            }
            Step::Iir { .. }
            | Step::Relu
            | Step::Clamp01
            | Step::TapResidual
            | Step::JoinResidual
            | Step::TapSkip { .. } => {}
        }
        (cin, self.channels)
    }
}

fn conv_macs(spec_shape: [usize; 4]) -> usize {
    let [cout, cpg, kh, kw] = spec_shape;
    cout * cpg * kh * kw
}

/// Derive the per-layer schedule for a config at a given frame size.
pub fn plan_schedule(config: &NetworkConfig, width: usize, height: usize) -> Result<LinePlan> {
    let ir = ModelIr::from_config(config)?;
    plan_schedule_ir(&ir, config, width, height)
}

pub(crate) fn plan_schedule_ir(
    ir: &ModelIr,
    config: &NetworkConfig,
    width: usize,
    height: usize,
) -> Result<LinePlan> {
    let div = config.required_divisor();
    if width == 0 || height == 0 || width % div != 0 || height % div != 0 {
        return Err(MagicError::Config(format!(
            "frame {width}x{height} must be a positive multiple of {div} for this config"
        )));
    }

    let mut walk = TrunkWalk::new(ir, config.in_channels);
    let mut layers: Vec<LayerPlan> = Vec::new();
    let mut skips: Vec<SkipPlan> = Vec::new();
    let mut delay = 0usize;
    let mut residual_taps: Vec<(usize, usize, usize)> = Vec::new(); // (delay, channels, scale)
    let mut skip_taps: Vec<Option<(usize, usize, usize)>> = vec![None; ir.skip_count];
    let mut residual_join_count = 0usize;

    for step in &ir.steps {
        let scale = walk.scale;
        let w_s = width / scale;
        let cin = walk.channels;
        match *step {
            Step::Conv { kernel, bias: _, groups: _, kh, kw } => {
                let spec = &ir.params[kernel];
                let cout = spec.shape[0];
                let lines = kh - 1;
                let d = (kh / 2) * scale;
                layers.push(LayerPlan {
                    name: spec.name.trim_end_matches(".weight").to_string(),
                    kind: PlanKind::Fir,
                    scale,
                    in_channels: cin,
                    out_channels: cout,
                    vertical_extent: kh,
                    lines_buffered: lines,
                    buffered_samples: lines * w_s * cin,
                    delay_lines: d,
                    macs_per_pixel: conv_macs([cout, spec.shape[1], kh, kw]),
                });
                delay += d;
            }
            Step::Iir { w1, .. } => {
                let name = ir.params[w1].name.trim_end_matches(".w1").to_string();
                layers.push(LayerPlan {
                    name,
                    kind: PlanKind::Iir,
                    scale,
                    in_channels: cin,
                    out_channels: cin,
                    vertical_extent: 1,
                    lines_buffered: 1,
                    buffered_samples: w_s * cin,
                    delay_lines: 0,
                    macs_per_pixel: 3 * cin,
                });
            }
            Step::Pool4 => {
                layers.push(LayerPlan {
                    name: format!("pool@{scale}"),
                    kind: PlanKind::Pool,
                    scale,
                    in_channels: cin,
                    out_channels: cin,
                    vertical_extent: 4,
                    lines_buffered: 3,
                    buffered_samples: 3 * w_s * cin,
                    delay_lines: 3 * scale,
                    macs_per_pixel: 0,
                });
                delay += 3 * scale;
            }
            Step::Upsample4 => {
                layers.push(LayerPlan {
                    name: format!("upsample@{scale}"),
                    kind: PlanKind::Upsample,
                    scale,
                    in_channels: cin,
                    out_channels: cin,
                    vertical_extent: 1,
                    lines_buffered: 0,
                    buffered_samples: 0,
                    delay_lines: 0,
                    macs_per_pixel: 0,
                });
            }
            Step::TapResidual => residual_taps.push((delay, cin, scale)),
            Step::JoinResidual => {
                let (tap_delay, ch, tap_scale) = residual_taps
                    .pop()
                    .ok_or_else(|| MagicError::Internal("residual join without tap".into()))?;
                debug_assert_eq!(tap_scale, scale);
                let span = delay - tap_delay;
                debug_assert_eq!(span % scale, 0);
                let rows = span / scale;
                layers.push(LayerPlan {
                    name: format!("residual{residual_join_count}@{scale}"),
                    kind: PlanKind::ResidualJoin,
                    scale,
                    in_channels: ch,
                    out_channels: ch,
                    vertical_extent: 1,
                    lines_buffered: rows,
                    buffered_samples: rows * w_s * ch,
                    delay_lines: 0,
                    macs_per_pixel: 0,
                });
                residual_join_count += 1;
            }
            Step::TapSkip { slot, kernel, .. } => {
                let spec = &ir.params[kernel];
                let cout = spec.shape[0];
                layers.push(LayerPlan {
                    name: spec.name.trim_end_matches(".weight").to_string(),
                    kind: PlanKind::Fir,
                    scale,
                    in_channels: cin,
                    out_channels: cout,
                    vertical_extent: 1,
                    lines_buffered: 0,
                    buffered_samples: 0,
                    delay_lines: 0,
                    macs_per_pixel: conv_macs(spec.shape),
                });
                skip_taps[slot] = Some((delay, cout, scale));
            }
            Step::JoinSkip { slot, kernel, .. } => {
                let (tap_delay, skip_ch, tap_scale) = skip_taps[slot]
                    .take()
                    .ok_or_else(|| MagicError::Internal("skip join before tap".into()))?;
                debug_assert_eq!(tap_scale, scale);
                let span = delay - tap_delay;
                debug_assert_eq!(span % scale, 0);
                let rows = span / scale;
                let spec = &ir.params[kernel];
                let skip_cfg = &config.skips[slot];
                skips.push(SkipPlan {
                    name: format!("skip{}", skip_cfg.from_scale),
                    scale,
                    channels: skip_ch,
                    span_lines: span,
                    rows_held: rows,
                    buffered_samples: rows * w_s * skip_ch,
                    dpcm: skip_cfg.dpcm_config(),
                });
                layers.push(LayerPlan {
                    name: spec.name.trim_end_matches(".weight").to_string(),
                    kind: PlanKind::SkipJoin,
                    scale,
                    in_channels: skip_ch,
                    out_channels: spec.shape[0],
                    vertical_extent: 1,
                    lines_buffered: 0,
                    buffered_samples: 0,
                    delay_lines: 0,
                    macs_per_pixel: conv_macs(spec.shape),
                });
            }
            Step::Relu | Step::Clamp01 => {}
        }
        walk.advance(step);
    }

    let mut totals = PlanTotals { delay_lines: delay, ..Default::default() };
    for l in &layers {
        match l.kind {
            PlanKind::Fir => totals.fir_line_samples += l.buffered_samples,
            PlanKind::Pool => totals.pool_line_samples += l.buffered_samples,
            PlanKind::Iir => totals.iir_state_samples += l.buffered_samples,
            PlanKind::ResidualJoin => totals.residual_fifo_samples += l.buffered_samples,
            PlanKind::Upsample | PlanKind::SkipJoin => {}
        }
    }
    for s in &skips {
        totals.skip_fifo_samples += s.buffered_samples;
    }
    totals.total_buffered_samples = totals.fir_line_samples
        + totals.pool_line_samples
        + totals.iir_state_samples
        + totals.skip_fifo_samples
        + totals.residual_fifo_samples;

    Ok(LinePlan { width, height, layers, skips, totals })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{
        fir_ablation_config, reference_config, BlockKind, ScaleConfig,
    };

    fn single_conv_config(k: usize) -> NetworkConfig {
        NetworkConfig {
            in_channels: 2,
            out_channels: 2,
            scales: vec![ScaleConfig {
                factor: 1,
                width: 4,
                residual: false,
                blocks: vec![BlockKind::GroupConv { groups: 1, k }],
            }],
            skips: vec![],
        }
    }

    #[test]
    fn single_3x3_conv_delays_one_line() {
        let plan = plan_schedule(&single_conv_config(3), 64, 64).unwrap();
        assert_eq!(plan.totals.delay_lines, 1);
    }

    #[test]
    fn two_chained_3x3_convs_delay_two_lines() {
        let mut cfg = single_conv_config(3);
        cfg.scales[0].blocks.push(BlockKind::GroupConv { groups: 1, k: 3 });
        let plan = plan_schedule(&cfg, 64, 64).unwrap();
        assert_eq!(plan.totals.delay_lines, 2);
    }

    #[test]
    fn pointwise_only_network_has_zero_delay() {
        let cfg = NetworkConfig {
            in_channels: 2,
            out_channels: 2,
            scales: vec![ScaleConfig {
                factor: 1,
                width: 2,
                residual: false,
                blocks: vec![BlockKind::Pointwise; 3],
            }],
            skips: vec![],
        };
        let plan = plan_schedule(&cfg, 32, 32).unwrap();
        assert_eq!(plan.totals.delay_lines, 0);
        assert_eq!(plan.totals.total_buffered_samples, 0);
    }

    #[test]
    fn fir_at_sixteenth_scale_delays_16_lines_iir_zero() {
        // one 3x3 FIR layer at /16 contributes 16 full-res lines; the
        // hybrid (IIR) bottleneck block in the same position contributes 0
        let fir = plan_schedule(&fir_ablation_config(), 1920, 1088).unwrap();
        let iir = plan_schedule(&reference_config(), 1920, 1088).unwrap();
        let fir_bot: Vec<_> = fir
            .layers
            .iter()
            .filter(|l| l.scale == 16 && l.vertical_extent == 3)
            .collect();
        assert_eq!(fir_bot.len(), 2); // two bottleneck blocks, one 3x3 each
        for l in &fir_bot {
            assert_eq!(l.delay_lines, 16);
        }
        let iir_bot: Vec<_> = iir.layers.iter().filter(|l| l.kind == PlanKind::Iir).collect();
        assert_eq!(iir_bot.len(), 2);
        for l in iir_bot {
            assert_eq!(l.delay_lines, 0);
        }
        assert_eq!(fir.totals.delay_lines - iir.totals.delay_lines, 2 * 16);
    }

    #[test]
    fn reference_plan_delay_breakdown() {
        // stem 0; scale0 blocks 2x1; pool 3; scale1 blocks 2x4; pool 12;
        // bottleneck 0; decoder scale1 blocks 2x4; decoder scale0 blocks 2x1
        let plan = plan_schedule(&reference_config(), 64, 64).unwrap();
        assert_eq!(plan.totals.delay_lines, 2 + 3 + 8 + 12 + 8 + 2);
        // skip spans equal the delay of the bypassed paths:
        // skip1 bypasses pool1 (12); skip0 bypasses pool0 (3), the enc1
        // blocks (8), pool1 (12), and the dec1 blocks (8)
        let s0 = plan.skips.iter().find(|s| s.name == "skip0").unwrap();
        let s1 = plan.skips.iter().find(|s| s.name == "skip1").unwrap();
        assert_eq!(s1.span_lines, 12);
        assert_eq!(s1.rows_held, 3);
        assert_eq!(s0.span_lines, 3 + 8 + 12 + 8);
        assert_eq!(s0.rows_held, 31);
    }

    #[test]
    fn skip_span_matches_bypassed_path() {
        let plan = plan_schedule(&reference_config(), 64, 64).unwrap();
        for s in &plan.skips {
            assert_eq!(s.span_lines % s.scale, 0);
            assert_eq!(s.rows_held * s.scale, s.span_lines);
        }
    }

    #[test]
    fn rejects_frame_not_divisible() {
        assert!(plan_schedule(&reference_config(), 60, 64).is_err());
    }
}
