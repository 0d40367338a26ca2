use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Parameter, Tape, Tensor, ValueId};
use crate::error::{MagicError, Result};
use crate::real::Real;

use super::{BlockKind, NetworkConfig};

/// One primitive of the executable layer sequence. Parameter fields are
/// indices into the model's parameter list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Step {
    Conv { kernel: usize, bias: usize, groups: usize, kh: usize, kw: usize },
    Iir { w1: usize, w2: usize, w3: usize },
    Relu,
    Clamp01,
    Pool4,
    Upsample4,
    /// Save the current activation for a residual join.
    TapResidual,
    /// Add the most recently tapped activation to the current one.
    JoinResidual,
    /// Project the current activation onto skip slot `slot` (pointwise).
    TapSkip { slot: usize, kernel: usize, bias: usize },
    /// Decompress skip slot `slot` (pointwise) and concatenate it onto the
    /// current activation.
    JoinSkip { slot: usize, kernel: usize, bias: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    ConvKernel { fan_in: usize },
    Bias,
    IirW1,
    IirW2,
    IirW3,
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: [usize; 4],
    pub kind: ParamKind,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Structural build output: the step sequence and the parameter layout it
/// references. Shared by the whole-frame interpreter, the streaming
/// compiler, and the line planner.
#[derive(Clone, Debug)]
pub struct ModelIr {
    pub steps: Vec<Step>,
    pub params: Vec<ParamSpec>,
    pub skip_count: usize,
}

impl ModelIr {
    pub fn from_config(config: &NetworkConfig) -> Result<ModelIr> {
        config.validate()?;
        let mut b = IrBuilder::default();
        let widths: Vec<usize> = config.scales.iter().map(|s| s.width).collect();
        let n_scales = config.scales.len();

        b.conv("stem".to_string(), config.in_channels, widths[0], 1, 1, 1);
        b.steps.push(Step::Relu);

        // encoder
        for si in 0..n_scales {
            let sc = &config.scales[si];
            for (bi, kind) in sc.blocks.iter().enumerate() {
                b.block(format!("enc{si}.b{bi}"), sc.width, *kind, sc.residual);
            }
            if si + 1 < n_scales {
                if let Some(sk) = config.skip_at(si) {
                    let slot = config.skips.iter().position(|s| s.from_scale == si).unwrap();
                    let (k, bias) = b.conv_params(
                        format!("skip{si}.compress"),
                        sc.width,
                        sk.compressed_channels,
                        1,
                        1,
                        1,
                    );
                    b.steps.push(Step::TapSkip { slot, kernel: k, bias });
                }
                b.steps.push(Step::Pool4);
                b.conv(format!("enc{si}.down"), sc.width, widths[si + 1], 1, 1, 1);
                b.steps.push(Step::Relu);
            }
        }

        // decoder (mirror)
        for si in (0..n_scales.saturating_sub(1)).rev() {
            let sc = &config.scales[si];
            b.steps.push(Step::Upsample4);
            b.conv(format!("dec{si}.up"), widths[si + 1], sc.width, 1, 1, 1);
            b.steps.push(Step::Relu);
            if let Some(sk) = config.skip_at(si) {
                let slot = config.skips.iter().position(|s| s.from_scale == si).unwrap();
                let (k, bias) = b.conv_params(
                    format!("skip{si}.decompress"),
                    sk.compressed_channels,
                    sc.width,
                    1,
                    1,
                    1,
                );
                b.steps.push(Step::JoinSkip { slot, kernel: k, bias });
                b.conv(format!("dec{si}.fuse"), 2 * sc.width, sc.width, 1, 1, 1);
                b.steps.push(Step::Relu);
            }
            for (bi, kind) in sc.blocks.iter().enumerate() {
                b.block(format!("dec{si}.b{bi}"), sc.width, *kind, sc.residual);
            }
        }

        b.conv("head".to_string(), widths[0], config.out_channels, 1, 1, 1);
        b.steps.push(Step::Clamp01);

        Ok(ModelIr { steps: b.steps, params: b.params, skip_count: config.skips.len() })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }
}

#[derive(Default)]
struct IrBuilder {
    steps: Vec<Step>,
    params: Vec<ParamSpec>,
}

impl IrBuilder {
    fn conv_params(
        &mut self,
        name: String,
        cin: usize,
        cout: usize,
        groups: usize,
        kh: usize,
        kw: usize,
    ) -> (usize, usize) {
        let fan_in = (cin / groups) * kh * kw;
        self.params.push(ParamSpec {
            name: format!("{name}.weight"),
            shape: [cout, cin / groups, kh, kw],
            kind: ParamKind::ConvKernel { fan_in },
        });
        self.params.push(ParamSpec {
            name: format!("{name}.bias"),
            shape: [1, cout, 1, 1],
            kind: ParamKind::Bias,
        });
        (self.params.len() - 2, self.params.len() - 1)
    }

    fn conv(&mut self, name: String, cin: usize, cout: usize, groups: usize, kh: usize, kw: usize) {
        let (kernel, bias) = self.conv_params(name, cin, cout, groups, kh, kw);
        self.steps.push(Step::Conv { kernel, bias, groups, kh, kw });
    }

    fn iir(&mut self, name: String, channels: usize) {
        for (suffix, kind) in
            [("w1", ParamKind::IirW1), ("w2", ParamKind::IirW2), ("w3", ParamKind::IirW3)]
        {
            self.params.push(ParamSpec {
                name: format!("{name}.{suffix}"),
                shape: [1, channels, 1, 1],
                kind,
            });
        }
        let base = self.params.len() - 3;
        self.steps.push(Step::Iir { w1: base, w2: base + 1, w3: base + 2 });
    }

    fn block(&mut self, name: String, width: usize, kind: BlockKind, residual: bool) {
        if residual {
            self.steps.push(Step::TapResidual);
        }
        match kind {
            BlockKind::GroupConv { groups, k } => {
                self.conv(format!("{name}.spatial"), width, width, groups, k, k);
                self.steps.push(Step::Relu);
                self.conv(format!("{name}.point"), width, width, 1, 1, 1);
            }
            BlockKind::DepthwiseSeparable { k } => {
                self.conv(format!("{name}.spatial"), width, width, width, k, k);
                self.steps.push(Step::Relu);
                self.conv(format!("{name}.point"), width, width, 1, 1, 1);
            }
            BlockKind::HybridFirIir => {
                self.conv(format!("{name}.hfir"), width, width, width, 1, 3);
                self.iir(format!("{name}.iir"), width);
                self.steps.push(Step::Relu);
                self.conv(format!("{name}.point"), width, width, 1, 1, 1);
            }
            BlockKind::Pointwise => {
                self.conv(format!("{name}.point"), width, width, 1, 1, 1);
            }
        }
        if residual {
            self.steps.push(Step::JoinResidual);
        }
    }
}

/// A built network: config, executable layer sequence, and parameters.
#[derive(Clone)]
pub struct MagicModel<T> {
    pub config: NetworkConfig,
    pub ir: ModelIr,
    pub params: Vec<Parameter<T>>,
    /// Leading input channels that carry real data (the rest are zero-fill).
    pub active_in: usize,
    /// Leading output channels that are trained against targets.
    pub active_out: usize,
}

/// Stability bound for the IIR feedback weight.
pub const IIR_W1_BOUND: f64 = 0.99;

/// Deterministically initialize a model from `(config, seed)`:
/// fan-in-scaled uniform for convolution kernels, zero biases, and a
/// unit-DC-gain low-pass start for the IIR (w1 = 0.5, w2 = w3 = 0.25).
pub fn build_model<T: Real>(config: &NetworkConfig, seed: u64) -> Result<MagicModel<T>> {
    let ir = ModelIr::from_config(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(ir.params.len());
    for spec in &ir.params {
        let n = spec.numel();
        let tensor = match spec.kind {
            ParamKind::ConvKernel { fan_in } => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let data: Vec<T> = (0..n)
                    .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
                    .collect();
                Tensor::from_data(spec.shape, data)?
            }
            ParamKind::Bias => Tensor::zeros(spec.shape),
            ParamKind::IirW1 => Tensor::filled(spec.shape, T::from_f64(0.5)),
            ParamKind::IirW2 | ParamKind::IirW3 => Tensor::filled(spec.shape, T::from_f64(0.25)),
        };
        let mut p = Parameter::new(spec.name.clone(), tensor);
        if spec.kind == ParamKind::IirW1 {
            p = p.with_constraint(-IIR_W1_BOUND, IIR_W1_BOUND);
        }
        params.push(p);
    }
    let model = MagicModel {
        config: config.clone(),
        ir,
        params,
        active_in: config.in_channels,
        active_out: config.out_channels,
    };
    debug_assert_eq!(model.parameter_count(), config.parameter_count());
    Ok(model)
}

impl<T: Real> MagicModel<T> {
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    pub fn param_named(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_named_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Run the layer sequence on an already-padded input recorded on `tape`.
    /// Returns the output value id (clamped to [0, 1]).
    pub fn forward_on_tape(&self, tape: &mut Tape<T>, input: ValueId) -> Result<ValueId> {
        let mut cur = input;
        let mut residuals: Vec<ValueId> = Vec::new();
        let mut skip_slots: Vec<Option<ValueId>> = vec![None; self.ir.skip_count];
        for step in &self.ir.steps {
            cur = match *step {
                Step::Conv { kernel, bias, groups, kh, kw } => {
                    let k = tape.param(&self.params, kernel);
                    let b = tape.param(&self.params, bias);
                    tape.conv2d_grouped(cur, k, b, groups, kh, kw)?
                }
                Step::Iir { w1, w2, w3 } => {
                    let a = tape.param(&self.params, w1);
                    let b = tape.param(&self.params, w2);
                    let c = tape.param(&self.params, w3);
                    tape.iir_vertical(cur, a, b, c)?
                }
                Step::Relu => tape.relu(cur),
                Step::Clamp01 => tape.clamp01(cur),
                Step::Pool4 => tape.maxpool4(cur)?,
                Step::Upsample4 => tape.upsample_nearest4(cur),
                Step::TapResidual => {
                    residuals.push(cur);
                    cur
                }
                Step::JoinResidual => {
                    let saved = residuals.pop().ok_or_else(|| {
                        MagicError::Internal("residual join without tap".into())
                    })?;
                    tape.residual_add(cur, saved)?
                }
                Step::TapSkip { slot, kernel, bias } => {
                    let k = tape.param(&self.params, kernel);
                    let b = tape.param(&self.params, bias);
                    skip_slots[slot] = Some(tape.conv2d_grouped(cur, k, b, 1, 1, 1)?);
                    cur
                }
                Step::JoinSkip { slot, kernel, bias } => {
                    let saved = skip_slots[slot].take().ok_or_else(|| {
                        MagicError::Internal(format!("skip slot {slot} joined before tap"))
                    })?;
                    let k = tape.param(&self.params, kernel);
                    let b = tape.param(&self.params, bias);
                    let dec = tape.conv2d_grouped(saved, k, b, 1, 1, 1)?;
                    tape.concat_channels(cur, dec)?
                }
            };
        }
        Ok(cur)
    }

    /// Zero-fill missing input channels up to `in_channels`. Errors if the
    /// image carries more channels than the network accepts.
    pub fn prepare_input(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let [n, c, h, w] = image.shape();
        if c > self.config.in_channels {
            return Err(MagicError::Config(format!(
                "input has {c} channels but the network accepts at most {}",
                self.config.in_channels
            )));
        }
        if c == self.config.in_channels {
            return Ok(image.clone());
        }
        let mut out = Tensor::zeros([n, self.config.in_channels, h, w]);
        for nb in 0..n {
            for y in 0..h {
                let src = image.row(nb, y);
                out.row_mut(nb, y)[..c * w].copy_from_slice(src);
            }
        }
        Ok(out)
    }

    /// Whole-frame forward pass. The input is zero-filled to `in_channels`,
    /// reflect-padded so both spatial dims divide the pooling chain, run
    /// through the layer sequence, and cropped back.
    pub fn forward(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let prepared = self.prepare_input(image)?;
        let [_, _, h, w] = prepared.shape();
        let div = self.config.required_divisor();
        let padded = pad_reflect(&prepared, h.next_multiple_of(div), w.next_multiple_of(div));
        let mut tape = Tape::new();
        let input = tape.input(padded);
        let out = self.forward_on_tape(&mut tape, input)?;
        let out_t = tape.value(out);
        Ok(crop(out_t, h, w))
    }
}

/// Reflect-pad (edge-inclusive symmetric) the bottom and right to reach the
/// target size. The index pattern for n source elements is periodic with
/// period 2n: `a b c c b a a b c ...`, so any pad length is valid.
pub fn pad_reflect<T: Real>(t: &Tensor<T>, target_h: usize, target_w: usize) -> Tensor<T> {
    let [n, c, h, w] = t.shape();
    if h == target_h && w == target_w {
        return t.clone();
    }
    let reflect = |i: usize, n: usize| -> usize {
        let m = i % (2 * n);
        if m < n {
            m
        } else {
            2 * n - 1 - m
        }
    };
    let mut out = Tensor::zeros([n, c, target_h, target_w]);
    for nb in 0..n {
        for y in 0..target_h {
            let ys = reflect(y, h);
            for ch in 0..c {
                for x in 0..target_w {
                    let xs = reflect(x, w);
                    let v = t.at(nb, ch, ys, xs);
                    out.set(nb, ch, y, x, v);
                }
            }
        }
    }
    out
}

/// Crop to the top-left `h x w` region.
pub fn crop<T: Real>(t: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let [n, c, th, tw] = t.shape();
    if th == h && tw == w {
        return t.clone();
    }
    let mut out = Tensor::zeros([n, c, h, w]);
    for nb in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = t.at(nb, ch, y, x);
                    out.set(nb, ch, y, x, v);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{reference_config, ScaleConfig};

    fn toy_config() -> NetworkConfig {
        NetworkConfig {
            in_channels: 2,
            out_channels: 2,
            scales: vec![ScaleConfig {
                factor: 1,
                width: 4,
                residual: true,
                blocks: vec![BlockKind::GroupConv { groups: 2, k: 3 }],
            }],
            skips: vec![],
        }
    }

    #[test]
    fn toy_param_count_matches_hand_count() {
        // stem 2*4+4 = 12; spatial 4*(4/2)*9+4 = 76; point 4*4+4 = 20;
        // head 4*2+2 = 10; total 118
        let cfg = toy_config();
        assert_eq!(cfg.parameter_count(), 118);
        let model = build_model::<f32>(&cfg, 0).unwrap();
        assert_eq!(model.parameter_count(), 118);
    }

    #[test]
    fn reference_param_count_matches_closed_form() {
        let cfg = reference_config();
        let model = build_model::<f32>(&cfg, 7).unwrap();
        assert_eq!(model.parameter_count(), cfg.parameter_count());
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = reference_config();
        let a = build_model::<f32>(&cfg, 123).unwrap();
        let b = build_model::<f32>(&cfg, 123).unwrap();
        for (pa, pb) in a.params.iter().zip(&b.params) {
            assert_eq!(pa.tensor.data(), pb.tensor.data(), "param {}", pa.name);
        }
        let c = build_model::<f32>(&cfg, 124).unwrap();
        assert!(a.params.iter().zip(&c.params).any(|(x, y)| x.tensor.data() != y.tensor.data()));
    }

    #[test]
    fn zero_block_config_is_rejected() {
        let mut cfg = toy_config();
        cfg.scales[0].blocks.clear();
        assert!(build_model::<f32>(&cfg, 0).is_err());
    }

    #[test]
    fn iir_w1_parameters_carry_stability_constraint() {
        let model = build_model::<f32>(&reference_config(), 0).unwrap();
        let w1s: Vec<_> = model.params.iter().filter(|p| p.name.ends_with("iir.w1")).collect();
        assert_eq!(w1s.len(), 2);
        for p in w1s {
            let c = p.constraint.expect("w1 must be constrained");
            assert_eq!(c.lo, -IIR_W1_BOUND);
            assert_eq!(c.hi, IIR_W1_BOUND);
        }
    }

    #[test]
    fn forward_shapes_and_range() {
        use rand::{Rng, SeedableRng};
        let cfg = reference_config();
        let model = build_model::<f32>(&cfg, 1).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f32> = (0..6 * 64 * 64).map(|_| rng.gen_range(0.0..1.0)).collect();
        let img = Tensor::from_chw(6, 64, 64, &data).unwrap();
        let out = model.forward(&img).unwrap();
        assert_eq!(out.shape(), [1, 6, 64, 64]);
        assert!(out.data().iter().all(|v| v.is_finite()));
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn forward_is_deterministic() {
        use rand::{Rng, SeedableRng};
        let model = build_model::<f32>(&reference_config(), 2).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
        let data: Vec<f32> = (0..6 * 32 * 32).map(|_| rng.gen_range(0.0..1.0)).collect();
        let img = Tensor::from_chw(6, 32, 32, &data).unwrap();
        let a = model.forward(&img).unwrap();
        let b = model.forward(&img).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn zeroed_head_outputs_clamped_bias() {
        let mut model = build_model::<f32>(&toy_config(), 3).unwrap();
        for v in model.param_named_mut("head.weight").unwrap().tensor.data_mut() {
            *v = 0.0;
        }
        {
            let b = model.param_named_mut("head.bias").unwrap();
            b.tensor.data_mut()[0] = 0.25;
            b.tensor.data_mut()[1] = -3.0; // clamps to 0
        }
        let img = Tensor::from_chw(2, 8, 8, &vec![0.5; 2 * 8 * 8]).unwrap();
        let out = model.forward(&img).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(out.at(0, 0, y, x), 0.25);
                assert_eq!(out.at(0, 1, y, x), 0.0);
            }
        }
    }

    #[test]
    fn too_many_channels_is_config_error() {
        let model = build_model::<f32>(&toy_config(), 0).unwrap();
        let img = Tensor::<f32>::zeros([1, 3, 8, 8]);
        assert!(matches!(model.forward(&img), Err(MagicError::Config(_))));
    }

    #[test]
    fn fewer_channels_are_zero_filled() {
        let model = build_model::<f32>(&toy_config(), 0).unwrap();
        let img = Tensor::<f32>::filled([1, 1, 8, 8], 0.5);
        let prepared = model.prepare_input(&img).unwrap();
        assert_eq!(prepared.shape(), [1, 2, 8, 8]);
        assert_eq!(prepared.at(0, 0, 3, 3), 0.5);
        assert_eq!(prepared.at(0, 1, 3, 3), 0.0);
    }

    #[test]
    fn pad_reflect_handles_large_pads() {
        let t = Tensor::<f32>::from_data([1, 1, 2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let p = pad_reflect(&t, 8, 8);
        assert_eq!(p.shape(), [1, 1, 8, 8]);
        // rows follow the pattern 0 1 1 0 0 1 1 0
        assert_eq!(p.at(0, 0, 2, 0), t.at(0, 0, 1, 0));
        assert_eq!(p.at(0, 0, 4, 0), t.at(0, 0, 0, 0));
        // cols follow 0 1 2 2 1 0 0 1
        assert_eq!(p.at(0, 0, 0, 3), t.at(0, 0, 0, 2));
        assert_eq!(p.at(0, 0, 0, 6), t.at(0, 0, 0, 0));
    }

    #[test]
    fn non_multiple_input_is_padded_and_cropped() {
        let model = build_model::<f32>(&reference_config(), 4).unwrap();
        let img = Tensor::<f32>::filled([1, 6, 20, 27], 0.3);
        let out = model.forward(&img).unwrap();
        assert_eq!(out.shape(), [1, 6, 20, 27]);
    }
}
