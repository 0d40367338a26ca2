use std::collections::VecDeque;

use crate::autodiff::ops::{conv_row, iir_row, pool4_row, upsample_row, ConvShape};
use crate::autodiff::Tensor;
use crate::dpcm::{self, DpcmConfig};
use crate::error::{MagicError, Result};
use crate::real::Real;
use crate::topology::{pad_reflect, MagicModel, Step};

use super::{plan_schedule_ir, LinePlan, TrunkWalk};

/// How skip-line samples are carried while buffered.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SkipPrecision {
    /// Full float precision; proves equivalence with the whole-frame path.
    #[default]
    Exact,
    /// 12-bit fixed point on every skip buffer, with the DPCM codec applied
    /// on skips that enable it — the hardware datapath.
    Quantized,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct StreamOptions {
    pub skip_precision: SkipPrecision,
}

/// One row of samples at some scale: `channels * width` values,
/// channel-major.
type Row<T> = Vec<T>;

/// Outcome of offering a node the chance to consume input.
enum Fire<T> {
    /// No input (or an incomplete input pair); nothing consumed.
    Blocked,
    /// Consumed one input row; zero or more output rows produced.
    Progress(Vec<Row<T>>),
}

enum NodeKind<T> {
    Source,
    Conv {
        kernel: Vec<T>,
        bias: Vec<T>,
        cs: ConvShape,
        width: usize,
        frame_rows: usize,
        /// Last `kh - 1` input rows (absolute indices `rows_in - len ..
        /// rows_in`).
        ring: VecDeque<Row<T>>,
    },
    Iir {
        w1: Vec<T>,
        w2: Vec<T>,
        w3: Vec<T>,
        channels: usize,
        width: usize,
        state: Vec<T>,
    },
    Pool {
        channels: usize,
        in_width: usize,
        pending: Vec<Row<T>>,
    },
    /// Nearest upsampling, paced by its output line clock: one coarse row
    /// fans out to four fine rows, released one per fine-line time
    /// (`stride` full-resolution pushes apart). Without pacing, rows inside
    /// a tile would race ahead of the schedule the plan models.
    Upsample {
        channels: usize,
        in_width: usize,
        stride: usize,
        pending: Option<Row<T>>,
        emitted: usize,
        next_release: usize,
    },
    Relu,
    Clamp01,
    /// Residual join: port 0 trunk, port 1 tapped branch (FIFO).
    Add,
    /// Skip join: port 0 trunk, port 1 compressed skip FIFO. Pops one
    /// compressed row, decompresses it with a pointwise conv, and
    /// concatenates it after the trunk channels.
    JoinSkip {
        kernel: Vec<T>,
        bias: Vec<T>,
        cs: ConvShape,
        width: usize,
    },
    /// Skip-line precision model, applied before the FIFO. In `Exact` mode
    /// this is the identity.
    SkipCodec {
        quantize: Option<u32>,
        dpcm: Option<DpcmConfig>,
        channels: usize,
        width: usize,
    },
}

struct Node<T> {
    name: String,
    kind: NodeKind<T>,
    /// (consumer node, consumer port)
    out_edges: Vec<(usize, usize)>,
    in_queues: Vec<VecDeque<Row<T>>>,
    /// Whether each input queue models a persistent FIFO (skip/residual).
    in_counted: Vec<bool>,
    in_samples_per_row: Vec<usize>,
    in_peak_rows: Vec<usize>,
    rows_in: usize,
    rows_out: usize,
    pool_peak: usize,
    finished: bool,
}

impl<T: Real> Node<T> {
    fn new(name: String, kind: NodeKind<T>, ports: usize) -> Self {
        Node {
            name,
            kind,
            out_edges: Vec::new(),
            in_queues: (0..ports).map(|_| VecDeque::new()).collect(),
            in_counted: vec![false; ports],
            in_samples_per_row: vec![0; ports],
            in_peak_rows: vec![0; ports],
            rows_in: 0,
            rows_out: 0,
            pool_peak: 0,
            finished: false,
        }
    }

    fn internal_samples(&self) -> usize {
        match &self.kind {
            NodeKind::Conv { ring, cs, width, .. } => ring.len() * cs.cin * width,
            NodeKind::Iir { state, .. } => state.len(),
            NodeKind::Pool { pending, channels, in_width } => {
                pending.len() * channels * in_width
            }
            _ => 0,
        }
    }
}

/// Per-frame streaming state: ring line buffers, IIR state rows, skip and
/// residual FIFOs, and consumed/emitted counters. Strictly sequential.
pub struct StreamContext<T> {
    nodes: Vec<Node<T>>,
    sink: usize,
    width: usize,
    height: usize,
    in_channels: usize,
    rows_pushed: usize,
    flushed: bool,
    emitted: Vec<Row<T>>,
    rows_emitted_total: usize,
    plan: LinePlan,
    peak_samples: usize,
    /// Full-resolution line clock: index of the push currently being
    /// processed; `usize::MAX` once flushing.
    clock: usize,
}

impl<T: Real> StreamContext<T> {
    /// Build a per-frame context for an already-padded frame size (both
    /// dims must divide the config's pooling chain).
    pub fn new(
        model: &MagicModel<T>,
        width: usize,
        height: usize,
        opts: StreamOptions,
    ) -> Result<Self> {
        let plan = plan_schedule_ir(&model.ir, &model.config, width, height)?;
        let ir = &model.ir;
        let mut nodes: Vec<Node<T>> = Vec::new();
        nodes.push(Node::new("source".into(), NodeKind::Source, 0));

        let mut cur = 0usize; // trunk producer
        let mut residual_taps: Vec<usize> = Vec::new();
        let mut skip_sources: Vec<Option<usize>> = vec![None; ir.skip_count];
        let mut walk = TrunkWalk::new(ir, model.config.in_channels);

        let connect = |nodes: &mut Vec<Node<T>>,
                       from: usize,
                       to: usize,
                       port: usize,
                       counted: bool,
                       samples_per_row: usize| {
            nodes[from].out_edges.push((to, port));
            nodes[to].in_counted[port] = counted;
            nodes[to].in_samples_per_row[port] = samples_per_row;
        };

        let param_vec = |idx: usize| -> Vec<T> { model.params[idx].tensor.data().to_vec() };

        for step in &ir.steps {
            let scale = walk.scale;
            let w_s = width / scale;
            let h_s = height / scale;
            let cin = walk.channels;
            match *step {
                Step::Conv { kernel, bias, groups, kh, kw } => {
                    let cout = ir.params[kernel].shape[0];
                    let name = ir.params[kernel].name.trim_end_matches(".weight").to_string();
                    let kind = NodeKind::Conv {
                        kernel: param_vec(kernel),
                        bias: param_vec(bias),
                        cs: ConvShape::raw(cin, cout, groups, kh, kw),
                        width: w_s,
                        frame_rows: h_s,
                        ring: VecDeque::new(),
                    };
                    let id = nodes.len();
                    nodes.push(Node::new(name, kind, 1));
                    connect(&mut nodes, cur, id, 0, false, cin * w_s);
                    cur = id;
                }
                Step::Iir { w1, w2, w3 } => {
                    let name = ir.params[w1].name.trim_end_matches(".w1").to_string();
                    let kind = NodeKind::Iir {
                        w1: param_vec(w1),
                        w2: param_vec(w2),
                        w3: param_vec(w3),
                        channels: cin,
                        width: w_s,
                        state: vec![T::ZERO; cin * w_s],
                    };
                    let id = nodes.len();
                    nodes.push(Node::new(name, kind, 1));
                    connect(&mut nodes, cur, id, 0, false, cin * w_s);
                    cur = id;
                }
                Step::Relu => {
                    let id = nodes.len();
                    nodes.push(Node::new(format!("relu@{scale}"), NodeKind::Relu, 1));
                    connect(&mut nodes, cur, id, 0, false, cin * w_s);
                    cur = id;
                }
                Step::Clamp01 => {
                    let id = nodes.len();
                    nodes.push(Node::new(format!("clamp@{scale}"), NodeKind::Clamp01, 1));
                    connect(&mut nodes, cur, id, 0, false, cin * w_s);
                    cur = id;
                }
                Step::Pool4 => {
                    let id = nodes.len();
                    nodes.push(Node::new(
                        format!("pool@{scale}"),
                        NodeKind::Pool { channels: cin, in_width: w_s, pending: Vec::new() },
                        1,
                    ));
                    connect(&mut nodes, cur, id, 0, false, cin * w_s);
                    cur = id;
                }
                Step::Upsample4 => {
                    let id = nodes.len();
                    nodes.push(Node::new(
                        format!("upsample@{scale}"),
                        NodeKind::Upsample {
                            channels: cin,
                            in_width: w_s,
                            stride: scale / 4,
                            pending: None,
                            emitted: 0,
                            next_release: 0,
                        },
                        1,
                    ));
                    connect(&mut nodes, cur, id, 0, false, cin * w_s);
                    cur = id;
                }
                Step::TapResidual => residual_taps.push(cur),
                Step::JoinResidual => {
                    let tap = residual_taps
                        .pop()
                        .ok_or_else(|| MagicError::Internal("residual join without tap".into()))?;
                    let id = nodes.len();
                    nodes.push(Node::new(format!("residual@{scale}"), NodeKind::Add, 2));
                    connect(&mut nodes, cur, id, 0, false, cin * w_s);
                    connect(&mut nodes, tap, id, 1, true, cin * w_s);
                    cur = id;
                }
                Step::TapSkip { slot, kernel, bias } => {
                    let skip_ch = ir.params[kernel].shape[0];
                    let name = ir.params[kernel].name.trim_end_matches(".weight").to_string();
                    let conv_id = nodes.len();
                    nodes.push(Node::new(
                        name,
                        NodeKind::Conv {
                            kernel: param_vec(kernel),
                            bias: param_vec(bias),
                            cs: ConvShape::raw(cin, skip_ch, 1, 1, 1),
                            width: w_s,
                            frame_rows: h_s,
                            ring: VecDeque::new(),
                        },
                        1,
                    ));
                    connect(&mut nodes, cur, conv_id, 0, false, cin * w_s);

                    let skip_cfg = &model.config.skips[slot];
                    let codec_id = nodes.len();
                    let quantize = match opts.skip_precision {
                        SkipPrecision::Exact => None,
                        SkipPrecision::Quantized => Some(
                            skip_cfg.dpcm_config().map(|c| c.input_bits).unwrap_or(12),
                        ),
                    };
                    let dpcm = match opts.skip_precision {
                        SkipPrecision::Exact => None,
                        SkipPrecision::Quantized => skip_cfg.dpcm_config(),
                    };
                    nodes.push(Node::new(
                        format!("skip{}.codec", skip_cfg.from_scale),
                        NodeKind::SkipCodec { quantize, dpcm, channels: skip_ch, width: w_s },
                        1,
                    ));
                    connect(&mut nodes, conv_id, codec_id, 0, false, skip_ch * w_s);
                    skip_sources[slot] = Some(codec_id);
                }
                Step::JoinSkip { slot, kernel, bias } => {
                    let src = skip_sources[slot]
                        .take()
                        .ok_or_else(|| MagicError::Internal("skip join before tap".into()))?;
                    let skip_ch = ir.params[kernel].shape[1];
                    let dec_ch = ir.params[kernel].shape[0];
                    let name = ir.params[kernel].name.trim_end_matches(".weight").to_string();
                    let id = nodes.len();
                    nodes.push(Node::new(
                        name,
                        NodeKind::JoinSkip {
                            kernel: param_vec(kernel),
                            bias: param_vec(bias),
                            cs: ConvShape::raw(skip_ch, dec_ch, 1, 1, 1),
                            width: w_s,
                        },
                        2,
                    ));
                    connect(&mut nodes, cur, id, 0, false, cin * w_s);
                    connect(&mut nodes, src, id, 1, true, skip_ch * w_s);
                    cur = id;
                }
            }
            walk.advance(step);
        }

        Ok(StreamContext {
            sink: cur,
            nodes,
            width,
            height,
            in_channels: model.config.in_channels,
            rows_pushed: 0,
            flushed: false,
            emitted: Vec::new(),
            rows_emitted_total: 0,
            plan,
            peak_samples: 0,
            clock: 0,
        })
    }

    pub fn plan(&self) -> &LinePlan {
        &self.plan
    }

    /// Push one full-resolution input row (`in_channels * width` samples,
    /// channel-major). Returns every output row whose dependencies are now
    /// satisfied, in order.
    pub fn push_line(&mut self, row: &[T]) -> Result<Vec<Row<T>>> {
        if self.flushed {
            return Err(MagicError::Usage("push_line after flush".into()));
        }
        if self.rows_pushed >= self.height {
            return Err(MagicError::Usage(format!(
                "push_line after frame complete ({} rows)",
                self.height
            )));
        }
        if row.len() != self.in_channels * self.width {
            return Err(MagicError::Usage(format!(
                "row has {} samples, expected in_channels*width = {}",
                row.len(),
                self.in_channels * self.width
            )));
        }
        self.clock = self.rows_pushed;
        self.rows_pushed += 1;
        self.deliver(0, row.to_vec());
        self.sweep(false)?;
        self.record_occupancy();
        Ok(std::mem::take(&mut self.emitted))
    }

    /// Finish the frame: run every layer's bottom-boundary handling (the
    /// same zero padding the whole-frame path uses) and emit the remaining
    /// rows. Total rows out equals rows in.
    pub fn flush(&mut self) -> Result<Vec<Row<T>>> {
        if self.flushed {
            return Err(MagicError::Usage("flush called twice".into()));
        }
        if self.rows_pushed == 0 {
            return Err(MagicError::Usage("flush before any push_line".into()));
        }
        if self.rows_pushed < self.height {
            return Err(MagicError::Usage(format!(
                "flush with {} of {} rows pushed",
                self.rows_pushed, self.height
            )));
        }
        self.flushed = true;
        self.clock = usize::MAX;
        self.sweep(true)?;
        self.record_occupancy();
        Ok(std::mem::take(&mut self.emitted))
    }

    /// Rows emitted so far (monotonically increasing).
    pub fn rows_emitted(&self) -> usize {
        self.rows_emitted_total
    }

    /// Peak of the instrumented occupancy counter, in samples, measured at
    /// the end of every push (steady state between line times).
    pub fn peak_samples(&self) -> usize {
        self.peak_samples
    }

    /// Current persistent-buffer occupancy in samples: line-buffer rings,
    /// IIR state rows, pool partial windows, and skip/residual FIFOs.
    pub fn current_samples(&self) -> usize {
        let mut total = 0;
        for n in &self.nodes {
            total += n.internal_samples();
            for (q, (counted, spr)) in
                n.in_queues.iter().zip(n.in_counted.iter().zip(&n.in_samples_per_row))
            {
                if *counted {
                    total += q.len() * spr;
                }
            }
        }
        total
    }

    /// Per-buffer end-of-push peaks: `(buffer name, samples)`.
    pub fn buffer_peaks(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        for n in &self.nodes {
            match &n.kind {
                NodeKind::Conv { cs, .. } if cs.kh > 1 => {
                    // ring occupancy grows monotonically up to kh-1 rows
                    out.push((format!("{}.lines", n.name), n.internal_samples()));
                }
                NodeKind::Iir { state, .. } => {
                    out.push((format!("{}.state", n.name), state.len()));
                }
                NodeKind::Pool { channels, in_width, .. } => {
                    out.push((format!("{}.lines", n.name), n.pool_peak * channels * in_width));
                }
                _ => {}
            }
            for (port, counted) in n.in_counted.iter().enumerate() {
                if *counted {
                    out.push((
                        format!("{}.fifo", n.name),
                        n.in_peak_rows[port] * n.in_samples_per_row[port],
                    ));
                }
            }
        }
        out
    }

    fn record_occupancy(&mut self) {
        for n in &mut self.nodes {
            if let NodeKind::Pool { pending, .. } = &n.kind {
                let rows = pending.len();
                n.pool_peak = n.pool_peak.max(rows);
            }
            for (port, q) in n.in_queues.iter().enumerate() {
                if n.in_counted[port] {
                    n.in_peak_rows[port] = n.in_peak_rows[port].max(q.len());
                }
            }
        }
        let cur = self.current_samples();
        self.peak_samples = self.peak_samples.max(cur);
    }

    fn deliver(&mut self, node: usize, row: Row<T>) {
        if node == self.sink {
            self.rows_emitted_total += 1;
            self.emitted.push(row);
            return;
        }
        let mut edges = self.nodes[node].out_edges.clone();
        if let Some((last_to, last_port)) = edges.pop() {
            for (to, port) in edges {
                self.nodes[to].in_queues[port].push_back(row.clone());
            }
            self.nodes[last_to].in_queues[last_port].push_back(row);
        }
    }

    fn sweep(&mut self, finish: bool) -> Result<()> {
        for idx in 1..self.nodes.len() {
            while let Fire::Progress(rows) = self.try_fire(idx)? {
                for r in rows {
                    self.emit(idx, r);
                }
            }
            if finish && !self.nodes[idx].finished {
                let rows = self.finish_node(idx)?;
                for r in rows {
                    self.emit(idx, r);
                }
                self.nodes[idx].finished = true;
            }
        }
        Ok(())
    }

    fn emit(&mut self, node: usize, row: Row<T>) {
        self.nodes[node].rows_out += 1;
        self.deliver(node, row);
    }

    /// Fire a node once if its inputs allow; returns emitted rows.
    fn try_fire(&mut self, idx: usize) -> Result<Fire<T>> {
        let clock = self.clock;
        let node = &mut self.nodes[idx];
        match &mut node.kind {
            NodeKind::Source => Ok(Fire::Blocked),
            NodeKind::Conv { kernel, bias, cs, width, frame_rows, ring } => {
                let Some(x) = node.in_queues[0].pop_front() else { return Ok(Fire::Blocked) };
                let pad_v = cs.kh / 2;
                let j = node.rows_in;
                node.rows_in += 1;
                let mut out = Vec::new();
                if j >= pad_v {
                    let r = j - pad_v; // output row index
                    let zero = vec![T::ZERO; cs.cin * *width];
                    let mut window: Vec<&[T]> = Vec::with_capacity(cs.kh);
                    let ring_start = j as isize - ring.len() as isize;
                    for ky in 0..cs.kh {
                        let src = r as isize + ky as isize - pad_v as isize;
                        if src < 0 || src >= *frame_rows as isize {
                            window.push(&zero);
                        } else if src == j as isize {
                            window.push(&x);
                        } else {
                            window.push(&ring[(src - ring_start) as usize]);
                        }
                    }
                    let mut o = vec![T::ZERO; cs.cout * *width];
                    conv_row(&window, kernel, bias, *cs, *width, &mut o);
                    out.push(o);
                }
                if cs.kh > 1 {
                    ring.push_back(x);
                    while ring.len() > cs.kh - 1 {
                        ring.pop_front();
                    }
                }
                Ok(Fire::Progress(out))
            }
            NodeKind::Iir { w1, w2, w3, channels, width, state } => {
                let Some(x) = node.in_queues[0].pop_front() else { return Ok(Fire::Blocked) };
                node.rows_in += 1;
                let mut o = vec![T::ZERO; *channels * *width];
                iir_row(state, &x, w1, w2, w3, *channels, *width, &mut o);
                Ok(Fire::Progress(vec![o]))
            }
            NodeKind::Pool { channels, in_width, pending } => {
                let Some(x) = node.in_queues[0].pop_front() else { return Ok(Fire::Blocked) };
                node.rows_in += 1;
                if pending.len() == 3 {
                    let rows = [&pending[0][..], &pending[1][..], &pending[2][..], &x[..]];
                    let mut o = vec![T::ZERO; *channels * (*in_width / 4)];
                    pool4_row(&rows, *channels, *in_width, &mut o, None);
                    pending.clear();
                    Ok(Fire::Progress(vec![o]))
                } else {
                    pending.push(x);
                    node.pool_peak = node.pool_peak.max(pending.len());
                    Ok(Fire::Progress(Vec::new()))
                }
            }
            NodeKind::Upsample { channels, in_width, stride, pending, emitted, next_release } => {
                if pending.is_none() {
                    let Some(x) = node.in_queues[0].pop_front() else { return Ok(Fire::Blocked) };
                    node.rows_in += 1;
                    *pending = Some(x);
                    *emitted = 0;
                    *next_release = clock;
                }
                if clock < *next_release {
                    return Ok(Fire::Blocked);
                }
                let coarse = pending.as_ref().unwrap();
                let mut fine = vec![T::ZERO; *channels * *in_width * 4];
                upsample_row(coarse, *channels, *in_width, &mut fine);
                *emitted += 1;
                *next_release = next_release.saturating_add(*stride);
                if *emitted == 4 {
                    *pending = None;
                }
                Ok(Fire::Progress(vec![fine]))
            }
            NodeKind::Relu => {
                let Some(mut x) = node.in_queues[0].pop_front() else { return Ok(Fire::Blocked) };
                node.rows_in += 1;
                for v in &mut x {
                    *v = (*v).max(T::ZERO);
                }
                Ok(Fire::Progress(vec![x]))
            }
            NodeKind::Clamp01 => {
                let Some(mut x) = node.in_queues[0].pop_front() else { return Ok(Fire::Blocked) };
                node.rows_in += 1;
                for v in &mut x {
                    *v = (*v).max(T::ZERO).min(T::ONE);
                }
                Ok(Fire::Progress(vec![x]))
            }
            NodeKind::Add => {
                if node.in_queues[0].is_empty() || node.in_queues[1].is_empty() {
                    return Ok(Fire::Blocked);
                }
                let mut a = node.in_queues[0].pop_front().unwrap();
                let b = node.in_queues[1].pop_front().unwrap();
                node.rows_in += 1;
                for (av, bv) in a.iter_mut().zip(&b) {
                    *av += *bv;
                }
                Ok(Fire::Progress(vec![a]))
            }
            NodeKind::JoinSkip { kernel, bias, cs, width } => {
                if node.in_queues[0].is_empty() || node.in_queues[1].is_empty() {
                    return Ok(Fire::Blocked);
                }
                let trunk = node.in_queues[0].pop_front().unwrap();
                let skip = node.in_queues[1].pop_front().unwrap();
                node.rows_in += 1;
                let mut dec = vec![T::ZERO; cs.cout * *width];
                conv_row(&[&skip], kernel, bias, *cs, *width, &mut dec);
                let mut out = trunk;
                out.extend_from_slice(&dec);
                Ok(Fire::Progress(vec![out]))
            }
            NodeKind::SkipCodec { quantize, dpcm, channels, width } => {
                let Some(mut x) = node.in_queues[0].pop_front() else { return Ok(Fire::Blocked) };
                node.rows_in += 1;
                if let Some(bits) = quantize {
                    for c in 0..*channels {
                        let seg = &mut x[c * *width..(c + 1) * *width];
                        let q: Vec<i64> =
                            seg.iter().map(|v| dpcm::quantize_unit(v.to_f64(), *bits)).collect();
                        let q = match dpcm {
                            Some(cfg) => {
                                let codes = dpcm::dpcm_encode(&q, cfg)
                                    .map_err(|e| MagicError::Internal(e.to_string()))?;
                                dpcm::dpcm_decode(&codes, cfg)
                                    .map_err(|e| MagicError::Internal(e.to_string()))?
                            }
                            None => q,
                        };
                        for (v, qi) in seg.iter_mut().zip(q) {
                            *v = T::from_f64(dpcm::dequantize_unit(qi, *bits));
                        }
                    }
                }
                Ok(Fire::Progress(vec![x]))
            }
        }
    }

    /// Bottom-of-frame handling: a conv completes its remaining rows with
    /// virtual zero rows below the frame, matching whole-frame zero
    /// padding. Every other node has nothing left to do; their queues must
    /// already be drained.
    fn finish_node(&mut self, idx: usize) -> Result<Vec<Row<T>>> {
        let node = &mut self.nodes[idx];
        for (port, q) in node.in_queues.iter().enumerate() {
            if !q.is_empty() {
                return Err(MagicError::Internal(format!(
                    "{}: port {port} still holds {} rows at flush",
                    node.name,
                    q.len()
                )));
            }
        }
        match &mut node.kind {
            NodeKind::Conv { kernel, bias, cs, width, frame_rows, ring } => {
                let pad_v = cs.kh / 2;
                if node.rows_in != *frame_rows {
                    return Err(MagicError::Internal(format!(
                        "{}: consumed {} of {} rows at flush",
                        node.name, node.rows_in, frame_rows
                    )));
                }
                let zero = vec![T::ZERO; cs.cin * *width];
                let mut rows = Vec::new();
                let ring_start = node.rows_in as isize - ring.len() as isize;
                for r in node.rows_out..*frame_rows {
                    let mut window: Vec<&[T]> = Vec::with_capacity(cs.kh);
                    for ky in 0..cs.kh {
                        let src = r as isize + ky as isize - pad_v as isize;
                        if src < 0 || src >= *frame_rows as isize {
                            window.push(&zero);
                        } else {
                            window.push(&ring[(src - ring_start) as usize]);
                        }
                    }
                    let mut o = vec![T::ZERO; cs.cout * *width];
                    conv_row(&window, kernel, bias, *cs, *width, &mut o);
                    rows.push(o);
                }
                Ok(rows)
            }
            NodeKind::Pool { pending, .. } => {
                if !pending.is_empty() {
                    return Err(MagicError::Internal(
                        "pool holds a partial window at flush (frame height not a multiple of 4)"
                            .into(),
                    ));
                }
                Ok(Vec::new())
            }
            NodeKind::Upsample { pending, .. } => {
                if pending.is_some() {
                    return Err(MagicError::Internal(
                        "upsampler still fanning out a row at flush".into(),
                    ));
                }
                Ok(Vec::new())
            }
            _ => Ok(Vec::new()),
        }
    }
}

/// Push all rows of an image through a fresh [`StreamContext`], flush, and
/// assemble the output frame. Matches [`MagicModel::forward`] on the same
/// image.
pub fn stream_infer<T: Real>(
    model: &MagicModel<T>,
    image: &Tensor<T>,
    opts: StreamOptions,
) -> Result<Tensor<T>> {
    let prepared = model.prepare_input(image)?;
    let [n, _, h, w] = prepared.shape();
    if n != 1 {
        return Err(MagicError::Usage("stream_infer takes a single frame".into()));
    }
    let div = model.config.required_divisor();
    let padded = pad_reflect(&prepared, h.next_multiple_of(div), w.next_multiple_of(div));
    let [_, _, ph, pw] = padded.shape();

    let mut ctx = StreamContext::new(model, pw, ph, opts)?;
    let mut rows: Vec<Row<T>> = Vec::with_capacity(ph);
    for y in 0..ph {
        rows.extend(ctx.push_line(padded.row(0, y))?);
    }
    rows.extend(ctx.flush()?);
    if rows.len() != ph {
        return Err(MagicError::Internal(format!(
            "streaming emitted {} rows for a {ph}-row frame",
            rows.len()
        )));
    }

    let cout = model.config.out_channels;
    let mut out = Tensor::zeros([1, cout, ph, pw]);
    for (y, r) in rows.iter().enumerate() {
        out.row_mut(0, y).copy_from_slice(r);
    }
    Ok(crate::topology::crop(&out, h, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{
        build_model, reference_config, BlockKind, NetworkConfig, ScaleConfig,
    };
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_image(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..c * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::from_chw(c, h, w, &data).unwrap()
    }

    fn identity_pointwise_config(c: usize) -> NetworkConfig {
        NetworkConfig {
            in_channels: c,
            out_channels: c,
            scales: vec![ScaleConfig {
                factor: 1,
                width: c,
                residual: false,
                blocks: vec![BlockKind::Pointwise],
            }],
            skips: vec![],
        }
    }

    /// Overwrite every conv with an identity channel map so the whole
    /// network computes the identity on [0,1] inputs.
    fn make_identity(model: &mut MagicModel<f32>) {
        for p in &mut model.params {
            if p.name.ends_with(".weight") {
                let [cout, cpg, kh, kw] = p.tensor.shape();
                for v in p.tensor.data_mut() {
                    *v = 0.0;
                }
                for oc in 0..cout.min(cpg) {
                    let i = ((oc * kh + kh / 2) * cpg + oc) * kw + kw / 2;
                    p.tensor.data_mut()[i] = 1.0;
                }
            } else if p.name.ends_with(".bias") {
                for v in p.tensor.data_mut() {
                    *v = 0.0;
                }
            }
        }
    }

    #[test]
    fn identity_network_emits_each_pushed_row() {
        let cfg = identity_pointwise_config(3);
        let mut model = build_model::<f32>(&cfg, 0).unwrap();
        make_identity(&mut model);
        let img = rand_image(3, 8, 8, 1);
        let mut ctx = StreamContext::new(&model, 8, 8, StreamOptions::default()).unwrap();
        for y in 0..8 {
            let out = ctx.push_line(img.row(0, y)).unwrap();
            assert_eq!(out.len(), 1, "row {y} should emit immediately");
            assert_eq!(out[0], img.row(0, y), "row {y} should pass through");
        }
        let rest = ctx.flush().unwrap();
        assert!(rest.is_empty());
    }

    #[test]
    fn first_emission_matches_plan_delay() {
        let model = build_model::<f32>(&reference_config(), 11).unwrap();
        let img = rand_image(6, 64, 64, 2);
        let mut ctx = StreamContext::new(&model, 64, 64, StreamOptions::default()).unwrap();
        let delay = ctx.plan().totals.delay_lines;
        let mut first = None;
        for y in 0..64 {
            let out = ctx.push_line(img.row(0, y)).unwrap();
            if !out.is_empty() && first.is_none() {
                first = Some(y);
            }
        }
        ctx.flush().unwrap();
        assert_eq!(first, Some(delay), "first output row index == plan total delay");
    }

    #[test]
    fn nothing_emitted_before_the_delay() {
        let model = build_model::<f32>(&reference_config(), 12).unwrap();
        let img = rand_image(6, 64, 64, 3);
        let mut ctx = StreamContext::new(&model, 64, 64, StreamOptions::default()).unwrap();
        let delay = ctx.plan().totals.delay_lines;
        for y in 0..delay {
            let out = ctx.push_line(img.row(0, y)).unwrap();
            assert!(out.is_empty(), "row {y} emitted before the pipeline delay");
        }
    }

    #[test]
    fn conservation_rows_out_equals_rows_in() {
        let model = build_model::<f32>(&reference_config(), 13).unwrap();
        let img = rand_image(6, 64, 64, 4);
        let mut ctx = StreamContext::new(&model, 64, 64, StreamOptions::default()).unwrap();
        let mut total = 0;
        for y in 0..64 {
            total += ctx.push_line(img.row(0, y)).unwrap().len();
        }
        total += ctx.flush().unwrap().len();
        assert_eq!(total, 64);
    }

    #[test]
    fn usage_errors() {
        let cfg = identity_pointwise_config(2);
        let model = build_model::<f32>(&cfg, 0).unwrap();
        let img = rand_image(2, 8, 8, 5);

        // flush before any push
        let mut ctx = StreamContext::new(&model, 8, 8, StreamOptions::default()).unwrap();
        assert!(matches!(ctx.flush(), Err(MagicError::Usage(_))));

        // push after frame complete
        let mut ctx = StreamContext::new(&model, 8, 8, StreamOptions::default()).unwrap();
        for y in 0..8 {
            ctx.push_line(img.row(0, y)).unwrap();
        }
        assert!(matches!(ctx.push_line(img.row(0, 0)), Err(MagicError::Usage(_))));

        // double flush
        ctx.flush().unwrap();
        assert!(matches!(ctx.flush(), Err(MagicError::Usage(_))));

        // wrong row width
        let mut ctx = StreamContext::new(&model, 8, 8, StreamOptions::default()).unwrap();
        assert!(matches!(ctx.push_line(&[0.0; 7]), Err(MagicError::Usage(_))));
    }

    #[test]
    fn stream_equals_forward_on_constant_image() {
        let model = build_model::<f32>(&reference_config(), 14).unwrap();
        let img = Tensor::<f32>::filled([1, 6, 64, 64], 0.5);
        let a = model.forward(&img).unwrap();
        let b = stream_infer(&model, &img, StreamOptions::default()).unwrap();
        assert_eq!(a.data(), b.data(), "constant image must match exactly");
    }

    #[test]
    fn stream_equals_forward_bitexact_random() {
        for trial in 0..3 {
            let model = build_model::<f32>(&reference_config(), 20 + trial).unwrap();
            let img = rand_image(6, 64, 64, 30 + trial);
            let a = model.forward(&img).unwrap();
            let b = stream_infer(&model, &img, StreamOptions::default()).unwrap();
            let diff = a.max_abs_diff(&b);
            assert!(diff <= 1e-6, "trial {trial}: max abs diff {diff}");
            assert_eq!(a.data(), b.data(), "shared row kernels should be bit-exact");
        }
    }

    #[test]
    fn stream_matches_forward_on_odd_sizes_via_padding() {
        let model = build_model::<f32>(&reference_config(), 15).unwrap();
        let img = rand_image(3, 50, 70, 6); // fewer channels + non-multiple dims
        let a = model.forward(&img).unwrap();
        let b = stream_infer(&model, &img, StreamOptions::default()).unwrap();
        assert_eq!(a.shape(), [1, 6, 50, 70]);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn memory_never_exceeds_plan_totals() {
        let model = build_model::<f32>(&reference_config(), 16).unwrap();
        let img = rand_image(6, 64, 64, 7);
        let mut ctx = StreamContext::new(&model, 64, 64, StreamOptions::default()).unwrap();
        let ceiling = ctx.plan().totals.total_buffered_samples;
        for y in 0..64 {
            ctx.push_line(img.row(0, y)).unwrap();
            assert!(
                ctx.current_samples() <= ceiling,
                "row {y}: {} samples held, plan ceiling {ceiling}",
                ctx.current_samples()
            );
        }
        ctx.flush().unwrap();
        assert!(ctx.peak_samples() <= ceiling);
    }

    #[test]
    fn per_buffer_peaks_match_plan_at_steady_state() {
        // 128 rows: tall enough that every FIFO reaches steady state
        // during pushes for both variants.
        for cfg in [reference_config(), crate::topology::fir_ablation_config()] {
            let model = build_model::<f32>(&cfg, 17).unwrap();
            let img = rand_image(6, 128, 128, 8);
            let mut ctx = StreamContext::new(&model, 128, 128, StreamOptions::default()).unwrap();
            for y in 0..128 {
                ctx.push_line(img.row(0, y)).unwrap();
            }
            ctx.flush().unwrap();
            let instrumented: usize = ctx.buffer_peaks().iter().map(|(_, s)| s).sum();
            assert_eq!(
                instrumented,
                ctx.plan().totals.total_buffered_samples,
                "sum of per-buffer peaks == plan total"
            );
        }
    }

    #[test]
    fn monotonic_in_order_emission() {
        let model = build_model::<f32>(&reference_config(), 18).unwrap();
        let img = rand_image(6, 64, 64, 9);
        let fwd = model.forward(&img).unwrap();
        let mut ctx = StreamContext::new(&model, 64, 64, StreamOptions::default()).unwrap();
        let mut row_idx = 0usize;
        let mut check = |rows: Vec<Vec<f32>>| {
            for r in rows {
                assert_eq!(&r[..], fwd.row(0, row_idx), "row {row_idx} out of order");
                row_idx += 1;
            }
        };
        for y in 0..64 {
            let rows = ctx.push_line(img.row(0, y)).unwrap();
            check(rows);
        }
        check(ctx.flush().unwrap());
        assert_eq!(row_idx, 64);
    }

    #[test]
    fn lossless_dpcm_equals_plain_quantized_skips() {
        // residual_bits = input_bits + 1 makes the codec transparent with
        // respect to the quantized samples.
        let mut cfg = reference_config();
        cfg.skips[0].dpcm_bits = 13;
        let model = build_model::<f32>(&cfg, 19).unwrap();
        let img = rand_image(6, 64, 64, 10);
        let coded = stream_infer(
            &model,
            &img,
            StreamOptions { skip_precision: SkipPrecision::Quantized },
        )
        .unwrap();

        let mut cfg_plain = cfg.clone();
        cfg_plain.skips[0].dpcm_enabled = false;
        let mut model_plain = build_model::<f32>(&cfg_plain, 19).unwrap();
        // same weights: configs differ only in dpcm flags
        for (a, b) in model_plain.params.iter_mut().zip(&model.params) {
            a.tensor = b.tensor.clone();
        }
        let plain = stream_infer(
            &model_plain,
            &img,
            StreamOptions { skip_precision: SkipPrecision::Quantized },
        )
        .unwrap();
        assert_eq!(coded.data(), plain.data());
    }

    #[test]
    fn quantized_skips_stay_close_to_exact() {
        let model = build_model::<f32>(&reference_config(), 21).unwrap();
        let img = rand_image(6, 64, 64, 11);
        let exact = stream_infer(&model, &img, StreamOptions::default()).unwrap();
        let q = stream_infer(
            &model,
            &img,
            StreamOptions { skip_precision: SkipPrecision::Quantized },
        )
        .unwrap();
        let diff = exact.max_abs_diff(&q);
        assert!(diff > 0.0, "quantization must actually engage");
        assert!(diff < 0.05, "12-bit skips with 8-bit DPCM should stay close, got {diff}");
    }
}
