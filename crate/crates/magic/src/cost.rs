//! Abstract hardware cost accounting: line delays, memory bits, MAC
//! rates, receptive fields, and shift-sum weight approximation.
//!
//! Costs are reported in bits, MACs, and lines — never in silicon area or
//! power. Skip FIFOs carrying DPCM-coded samples are provisioned at the
//! residual bit width per sample (the per-row header lives in the codec
//! logic, which is negligible next to the buffers), so every memory total
//! is exactly linear in the image width.

use crate::autodiff::Tensor;
use crate::data::psnr;
use crate::error::{MagicError, Result};
use crate::streaming::{plan_schedule, LinePlan, PlanKind};
use crate::topology::{MagicModel, ModelIr, NetworkConfig, ParamKind, Step};

/// Abstract machine parameters; the clock and resolution defaults mirror a
/// 1080p30 pipeline at 500 MHz.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HardwareParams {
    pub width: usize,
    pub height: usize,
    pub fps: f64,
    pub clock_hz: f64,
    pub activation_bits: u32,
    pub weight_bits: u32,
}

impl Default for HardwareParams {
    fn default() -> Self {
        HardwareParams {
            width: 1920,
            height: 1080,
            fps: 30.0,
            clock_hz: 5e8,
            activation_bits: 12,
            weight_bits: 8,
        }
    }
}

impl HardwareParams {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0
            || self.height == 0
            || self.fps <= 0.0
            || self.clock_hz <= 0.0
            || self.activation_bits == 0
            || self.weight_bits == 0
        {
            return Err(MagicError::Config("all hardware parameters must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LayerCost {
    pub name: String,
    pub kind: PlanKind,
    pub scale: usize,
    pub delay_lines: usize,
    pub buffer_bits: u64,
    pub macs_per_pixel: usize,
    pub mac_per_s: f64,
}

#[derive(Clone, Debug)]
pub struct SkipCost {
    pub name: String,
    pub scale: usize,
    pub channels: usize,
    pub span_lines: usize,
    pub rows_held: usize,
    pub buffer_bits: u64,
    pub bits_per_sample: u32,
    pub dpcm: bool,
}

/// Memory bits by buffer category; `total` equals the sum of the parts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MemoryBits {
    pub fir_lines: u64,
    pub pool_lines: u64,
    pub iir_state: u64,
    pub skip_fifo: u64,
    pub residual_fifo: u64,
    pub total: u64,
}

#[derive(Clone, Debug)]
pub struct CostReport {
    pub hw: HardwareParams,
    /// Frame size after padding to the pooling chain's divisor.
    pub padded_width: usize,
    pub padded_height: usize,
    pub layers: Vec<LayerCost>,
    pub skips: Vec<SkipCost>,
    pub memory: MemoryBits,
    pub mac_per_s: f64,
    pub macs_per_clock: f64,
    pub latency_lines: usize,
    pub weight_bits_total: u64,
    pub rf: RfReport,
}

/// Receptive field of one output pixel, in full-resolution pixels.
/// `vertical` is `None` when an IIR makes it unbounded;
/// `effective_vertical` then reports the extent covering 99.9% of the
/// cumulative absolute impulse response.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RfReport {
    pub horizontal: usize,
    pub vertical: Option<usize>,
    pub effective_vertical: usize,
}

/// Rows needed to cover `threshold` of the IIR's cumulative absolute
/// impulse response `g[0] = w3, g[k] = w1^(k-1) * (w2 + w1*w3)`.
pub fn iir_effective_rows(w1: f64, w2: f64, w3: f64, threshold: f64) -> usize {
    let g0 = w3.abs();
    let tail0 = (w2 + w1 * w3).abs();
    let r = w1.abs();
    if r >= 1.0 {
        return usize::MAX;
    }
    let total = g0 + tail0 / (1.0 - r);
    if total <= 0.0 {
        return 1;
    }
    let mut cum = g0;
    let mut term = tail0;
    let mut rows = 1usize;
    while cum < threshold * total && rows < 100_000 {
        cum += term;
        term *= r;
        rows += 1;
    }
    rows
}

const RF_THRESHOLD: f64 = 0.999;

fn rf_from_ir(ir: &ModelIr, iir_rows: &dyn Fn(usize) -> usize) -> RfReport {
    let mut jump = 1usize;
    let mut h = 1usize;
    let mut v = 1usize;
    let mut v_eff = 1usize;
    let mut unbounded = false;
    let mut iir_index = 0usize;
    for step in &ir.steps {
        match *step {
            Step::Conv { kernel, .. } => {
                let [_, _, kh, kw] = ir.params[kernel].shape;
                h += (kw - 1) * jump;
                v += (kh - 1) * jump;
                v_eff += (kh - 1) * jump;
            }
            Step::Iir { .. } => {
                unbounded = true;
                let rows = iir_rows(iir_index);
                v_eff += (rows - 1) * jump;
                iir_index += 1;
            }
            Step::Pool4 => jump *= 4,
            Step::Upsample4 => jump /= 4,
            Step::TapSkip { .. }
            | Step::JoinSkip { .. }
            | Step::TapResidual
            | Step::JoinResidual
            | Step::Relu
            | Step::Clamp01 => {}
        }
    }
    RfReport {
        horizontal: h,
        vertical: if unbounded { None } else { Some(v) },
        effective_vertical: if unbounded { v_eff } else { v },
    }
}

/// Receptive field from the config alone; IIR stages use their
/// initialization weights (w1 = 0.5, w2 = w3 = 0.25).
pub fn receptive_field(config: &NetworkConfig) -> Result<RfReport> {
    let ir = ModelIr::from_config(config)?;
    let rows = iir_effective_rows(0.5, 0.25, 0.25, RF_THRESHOLD);
    Ok(rf_from_ir(&ir, &move |_| rows))
}

/// Receptive field using the model's trained IIR weights (worst channel).
pub fn receptive_field_of_model<T: crate::real::Real>(model: &MagicModel<T>) -> RfReport {
    let ir = &model.ir;
    let mut per_iir: Vec<usize> = Vec::new();
    for step in &ir.steps {
        if let Step::Iir { w1, w2, w3 } = *step {
            let a = model.params[w1].tensor.data();
            let b = model.params[w2].tensor.data();
            let c = model.params[w3].tensor.data();
            let rows = (0..a.len())
                .map(|i| {
                    iir_effective_rows(a[i].to_f64(), b[i].to_f64(), c[i].to_f64(), RF_THRESHOLD)
                })
                .max()
                .unwrap_or(1);
            per_iir.push(rows);
        }
    }
    rf_from_ir(ir, &move |i| per_iir[i])
}

/// Build the full cost report for a config on the given hardware
/// parameters. The frame is padded up to the pooling chain's divisor, as
/// the execution paths do.
pub fn memory_logic_report(config: &NetworkConfig, hw: &HardwareParams) -> Result<CostReport> {
    hw.validate()?;
    let div = config.required_divisor();
    let pw = hw.width.next_multiple_of(div);
    let ph = hw.height.next_multiple_of(div);
    let plan = plan_schedule(config, pw, ph)?;
    report_from_plan(config, hw, &plan)
}

fn report_from_plan(
    config: &NetworkConfig,
    hw: &HardwareParams,
    plan: &LinePlan,
) -> Result<CostReport> {
    let ab = hw.activation_bits as u64;
    let mut layers = Vec::with_capacity(plan.layers.len());
    let mut memory = MemoryBits::default();
    let mut mac_per_s = 0.0f64;
    for l in &plan.layers {
        let buffer_bits = l.buffered_samples as u64 * ab;
        match l.kind {
            PlanKind::Fir => memory.fir_lines += buffer_bits,
            PlanKind::Pool => memory.pool_lines += buffer_bits,
            PlanKind::Iir => memory.iir_state += buffer_bits,
            PlanKind::ResidualJoin => memory.residual_fifo += buffer_bits,
            PlanKind::Upsample | PlanKind::SkipJoin => {}
        }
        let px_per_s = (plan.width / l.scale) as f64 * (plan.height / l.scale) as f64 * hw.fps;
        let rate = l.macs_per_pixel as f64 * px_per_s;
        mac_per_s += rate;
        layers.push(LayerCost {
            name: l.name.clone(),
            kind: l.kind,
            scale: l.scale,
            delay_lines: l.delay_lines,
            buffer_bits,
            macs_per_pixel: l.macs_per_pixel,
            mac_per_s: rate,
        });
    }
    let mut skips = Vec::with_capacity(plan.skips.len());
    for s in &plan.skips {
        let bits_per_sample = match &s.dpcm {
            Some(cfg) => cfg.residual_bits,
            None => hw.activation_bits,
        };
        let buffer_bits = s.buffered_samples as u64 * bits_per_sample as u64;
        memory.skip_fifo += buffer_bits;
        skips.push(SkipCost {
            name: s.name.clone(),
            scale: s.scale,
            channels: s.channels,
            span_lines: s.span_lines,
            rows_held: s.rows_held,
            buffer_bits,
            bits_per_sample,
            dpcm: s.dpcm.is_some(),
        });
    }
    memory.total = memory.fir_lines
        + memory.pool_lines
        + memory.iir_state
        + memory.skip_fifo
        + memory.residual_fifo;

    let ir = ModelIr::from_config(config)?;
    let weight_bits_total = ir.parameter_count() as u64 * hw.weight_bits as u64;

    Ok(CostReport {
        hw: *hw,
        padded_width: plan.width,
        padded_height: plan.height,
        layers,
        skips,
        memory,
        mac_per_s,
        macs_per_clock: mac_per_s / hw.clock_hz,
        latency_lines: plan.totals.delay_lines,
        weight_bits_total,
        rf: receptive_field(config)?,
    })
}

impl CostReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "frame {}x{} (padded {}x{}) @ {} fps, clock {:.3e} Hz, {}-bit activations\n",
            self.hw.width,
            self.hw.height,
            self.padded_width,
            self.padded_height,
            self.hw.fps,
            self.hw.clock_hz,
            self.hw.activation_bits
        ));
        s.push_str(&format!(
            "memory bits: total {} (fir lines {}, pool lines {}, iir state {}, skip fifo {}, residual fifo {})\n",
            self.memory.total,
            self.memory.fir_lines,
            self.memory.pool_lines,
            self.memory.iir_state,
            self.memory.skip_fifo,
            self.memory.residual_fifo
        ));
        s.push_str(&format!(
            "compute: {:.4e} MAC/s = {:.2} MACs/clock; weights {} bits\n",
            self.mac_per_s, self.macs_per_clock, self.weight_bits_total
        ));
        s.push_str(&format!("latency: {} full-resolution lines\n", self.latency_lines));
        match self.rf.vertical {
            Some(v) => s.push_str(&format!(
                "receptive field: {} x {} (bounded)\n",
                self.rf.horizontal, v
            )),
            None => s.push_str(&format!(
                "receptive field: {} x unbounded (99.9% within {})\n",
                self.rf.horizontal, self.rf.effective_vertical
            )),
        }
        for sk in &self.skips {
            s.push_str(&format!(
                "skip {}: scale /{}, {} ch, span {} lines ({} rows), {} bits @{}b/sample{}\n",
                sk.name,
                sk.scale,
                sk.channels,
                sk.span_lines,
                sk.rows_held,
                sk.buffer_bits,
                sk.bits_per_sample,
                if sk.dpcm { " (DPCM)" } else { "" }
            ));
        }
        s
    }

    /// One row per layer, for diffing in tests.
    pub fn to_csv(&self) -> String {
        let mut s =
            String::from("name,kind,scale,delay_lines,buffer_bits,macs_per_pixel,mac_per_s\n");
        for l in &self.layers {
            s.push_str(&format!(
                "{},{:?},{},{},{},{},{:.6e}\n",
                l.name, l.kind, l.scale, l.delay_lines, l.buffer_bits, l.macs_per_pixel, l.mac_per_s
            ));
        }
        for k in &self.skips {
            s.push_str(&format!(
                "{},SkipFifo,{},0,{},0,0\n",
                k.name, k.scale, k.buffer_bits
            ));
        }
        s
    }
}

/// One signed power-of-two term of a shift-sum multiplier.
pub type SptTerm = (i8, i32); // (sign in {-1, +1}, exponent)

#[derive(Clone, Debug, PartialEq)]
pub struct ShiftSum {
    pub value: f64,
    pub terms: Vec<SptTerm>,
    pub abs_error: f64,
    pub rel_error: f64,
}

/// Best approximation of `w` by at most `max_terms` signed powers of two
/// with exponents in `exp_range`, by exhaustive search. Ties prefer fewer
/// terms, then smaller total exponent magnitude, then lexicographic order.
pub fn shift_sum_approx(w: f64, max_terms: usize, exp_range: (i32, i32)) -> Result<ShiftSum> {
    if !(1..=3).contains(&max_terms) {
        return Err(MagicError::Config(format!(
            "term count must be in [1, 3], got {max_terms}"
        )));
    }
    if exp_range.0 > exp_range.1 {
        return Err(MagicError::Config("empty exponent range".into()));
    }
    if w.abs() > 1.0 {
        return Err(MagicError::Input(format!(
            "shift-sum approximation expects normalized weights |w| <= 1, got {w}"
        )));
    }
    if w == 0.0 {
        return Ok(ShiftSum { value: 0.0, terms: vec![], abs_error: 0.0, rel_error: 0.0 });
    }

    let exps: Vec<i32> = (exp_range.0..=exp_range.1).collect();
    let mut best = ShiftSum { value: 0.0, terms: vec![], abs_error: w.abs(), rel_error: 1.0 };
    // tie-break: fewer terms, then the smallest leading exponents
    // (lexicographic on the descending-sorted exponent list), then positive
    // signs first
    let mut best_key: (f64, usize, Vec<i32>, Vec<i8>) = (w.abs(), 0, vec![], vec![]);

    let mut consider = |terms: &[SptTerm]| {
        let value: f64 = terms.iter().map(|(s, e)| *s as f64 * (2f64).powi(*e)).sum();
        let err = (w - value).abs();
        let mut sorted = terms.to_vec();
        sorted.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let exp_list: Vec<i32> = sorted.iter().map(|(_, e)| *e).collect();
        let sign_list: Vec<i8> = sorted.iter().map(|(s, _)| if *s > 0 { 0 } else { 1 }).collect();
        let key = (err, terms.len(), exp_list, sign_list);
        if key < best_key {
            best_key = key;
            best = ShiftSum {
                value,
                terms: sorted,
                abs_error: err,
                rel_error: err / w.abs(),
            };
        }
    };

    // k = 1..=max_terms terms; exponent multisets to avoid permutations
    for &s1 in &[1i8, -1] {
        for (i, &e1) in exps.iter().enumerate() {
            consider(&[(s1, e1)]);
            if max_terms >= 2 {
                for &s2 in &[1i8, -1] {
                    for (j, &e2) in exps.iter().enumerate().skip(i) {
                        consider(&[(s1, e1), (s2, e2)]);
                        if max_terms >= 3 {
                            for &s3 in &[1i8, -1] {
                                for &e3 in exps.iter().skip(j) {
                                    consider(&[(s1, e1), (s2, e2), (s3, e3)]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(best)
}

/// Exponent range used when quantizing model weights.
pub const SPT_EXP_RANGE: (i32, i32) = (-15, 0);

/// Replace every multiplicative weight (convolution kernels and IIR
/// weights; biases excluded) by its shift-sum approximation.
pub fn quantize_model_weights(
    model: &MagicModel<f32>,
    terms: usize,
) -> Result<MagicModel<f32>> {
    let mut q = model.clone();
    for (spec, param) in q.ir.params.clone().iter().zip(&mut q.params) {
        let multiplicative = matches!(
            spec.kind,
            ParamKind::ConvKernel { .. } | ParamKind::IirW1 | ParamKind::IirW2 | ParamKind::IirW3
        );
        if !multiplicative {
            continue;
        }
        for v in param.tensor.data_mut() {
            let approx = shift_sum_approx(*v as f64, terms, SPT_EXP_RANGE)?;
            *v = approx.value as f32;
        }
    }
    Ok(q)
}

/// PSNR of the shift-sum-quantized model's outputs against the float
/// model's outputs, averaged over the given images. 99 dB means identical.
pub fn quantized_forward_delta(
    model: &MagicModel<f32>,
    images: &[Tensor<f32>],
    terms: usize,
) -> Result<f64> {
    if images.is_empty() {
        return Err(MagicError::Input("no images given".into()));
    }
    let q = quantize_model_weights(model, terms)?;
    let mut sum = 0.0;
    for img in images {
        let a = model.forward(img)?;
        let b = q.forward(img)?;
        sum += psnr(&a, &b)?;
    }
    Ok(sum / images.len() as f64)
}
