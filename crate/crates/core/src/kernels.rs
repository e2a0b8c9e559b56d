//! Forward and backward paths for every attention pattern.
//!
//! Each pattern lowers to one recipe per head: chunked attention with
//! independent circular shifts of the queries and of the keys/values,
//! or dilated attention over a single congruence class of positions.
//! Shifts are realized through index arithmetic over the original
//! buffers, so a chunked head touches `m * w * w` score entries and
//! never materializes an `N x N` matrix.
//!
//! Causality is decided by original token positions: a key wrapped
//! around the sequence end is a future token for an early query and is
//! masked. A fully masked query row outputs exactly zero in that head,
//! as does a query outside a dilated head's selected set.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::pattern::{build_head_plans, AttnConfig, HeadPlan, PatternSpec};
use crate::tensor::{scratch_buf, softmax_row_in_place, Element, Tensor};

pub mod ma_count {
    //! Multiply-add instrumentation. The kernels report the exact trip
    //! counts of their score and weighted-sum loops; tests compare the
    //! tallies against the closed-form cost model.

    use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
    use std::sync::Mutex;

    static ENABLED: AtomicBool = AtomicBool::new(false);
    static COUNT: AtomicU64 = AtomicU64::new(0);
    static SESSION: Mutex<()> = Mutex::new(());

    #[inline]
    pub(crate) fn tally(mas: u64) {
        if ENABLED.load(Ordering::Relaxed) {
            COUNT.fetch_add(mas, Ordering::Relaxed);
        }
    }

    /// Run `f` with the multiply-add counter on; returns its result and
    /// the total count. Sessions serialize on a lock.
    pub fn session<R>(f: impl FnOnce() -> R) -> (R, u64) {
        let _guard = SESSION.lock().unwrap_or_else(|e| e.into_inner());
        COUNT.store(0, Ordering::SeqCst);
        ENABLED.store(true, Ordering::SeqCst);
        let out = f();
        ENABLED.store(false, Ordering::SeqCst);
        (out, COUNT.load(Ordering::SeqCst))
    }
}

/// Per-head execution recipe after pattern lowering.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum HeadExec {
    /// Chunked attention; query rows are read at a `q_shift` roll,
    /// key/value rows at a `kv_shift` roll, outputs written back at
    /// original query positions.
    Chunk { q_shift: usize, kv_shift: usize },
    /// Dense attention among positions congruent to `offset - 1`
    /// modulo `theta`.
    Dilated { theta: usize, offset: usize },
}

/// Forward result: outputs plus the activations backward needs.
pub struct AttnOutput<T: Element> {
    pub out: Tensor<T>,
    pub saved: Option<Saved<T>>,
}

/// Gradients with respect to the three inputs.
pub struct AttnGrads<T: Element> {
    pub dq: Tensor<T>,
    pub dk: Tensor<T>,
    pub dv: Tensor<T>,
}

/// Attention weights and head recipes captured by a forward call.
pub struct Saved<T: Element> {
    shape: [usize; 4],
    window: usize,
    causal: bool,
    heads: Vec<SavedHead<T>>,
}

impl<T: Element> Saved<T> {
    /// `[batch, heads, seq, dim]` of the forward call that produced this.
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn causal(&self) -> bool {
        self.causal
    }
}

enum SavedHead<T: Element> {
    /// Weights shaped `[B, m, w, w]`.
    Chunk {
        q_shift: usize,
        kv_shift: usize,
        weights: Tensor<T>,
    },
    /// Weights shaped `[B, ns, ns]` over the selected positions.
    Dilated {
        theta: usize,
        offset: usize,
        weights: Tensor<T>,
    },
}

fn validate_triple<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<[usize; 4]> {
    if q.ndim() != 4 {
        return Err(Error::ShapeMismatch {
            op: "attention",
            lhs: q.shape().to_vec(),
            rhs: vec![0, 0, 0, 0],
        });
    }
    for (t, name) in [(k, "keys"), (v, "values")] {
        if t.shape() != q.shape() {
            let _ = name;
            return Err(Error::ShapeMismatch {
                op: "attention",
                lhs: q.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
    }
    for t in [q, k, v] {
        if !t.is_all_finite() {
            return Err(Error::Numeric("non-finite value in attention input".into()));
        }
    }
    Ok([q.shape()[0], q.shape()[1], q.shape()[2], q.shape()[3]])
}

fn exec_from_plan(plan: &HeadPlan) -> HeadExec {
    match *plan {
        HeadPlan::Local => HeadExec::Chunk {
            q_shift: 0,
            kv_shift: 0,
        },
        HeadPlan::ShiftedChunk { shift } => HeadExec::Chunk {
            q_shift: 0,
            kv_shift: shift,
        },
        HeadPlan::Dilated { theta, offset } => HeadExec::Dilated { theta, offset },
    }
}

/// Lower a pattern to execution recipes plus the effective chunk window
/// (the full sequence for patterns without one).
fn lower_spec(spec: &PatternSpec, cfg: &AttnConfig) -> Result<(Vec<HeadExec>, usize)> {
    match spec {
        PatternSpec::S2 { window } => {
            if *window != cfg.window {
                return Err(Error::config(format!(
                    "pattern window {window} disagrees with config window {}",
                    cfg.window
                )));
            }
            if cfg.seq_len % window != 0 {
                return Err(Error::config(format!(
                    "window {window} does not divide seq_len {}",
                    cfg.seq_len
                )));
            }
            if window % 2 != 0 {
                return Err(Error::config(format!(
                    "s2 needs an even window, got {window}"
                )));
            }
            let g = window / 2;
            let execs = (0..cfg.heads)
                .map(|i| {
                    if i < cfg.heads / 2 {
                        HeadExec::Chunk {
                            q_shift: g,
                            kv_shift: g,
                        }
                    } else {
                        HeadExec::Chunk {
                            q_shift: 0,
                            kv_shift: 0,
                        }
                    }
                })
                .collect();
            Ok((execs, *window))
        }
        other => {
            let plans = build_head_plans(other, cfg)?;
            let window = other.window().unwrap_or(cfg.seq_len);
            Ok((plans.iter().map(exec_from_plan).collect(), window))
        }
    }
}

fn dilated_indices(n: usize, theta: usize, offset: usize) -> Vec<usize> {
    ((offset - 1)..n).step_by(theta).collect()
}

#[inline]
fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for i in 0..a.len() {
        acc = acc + a[i] * b[i];
    }
    acc
}

/// One chunked head for one (batch, head) pair. Slices are the
/// contiguous `[N, D]` blocks of the original tensors.
#[allow(clippy::too_many_arguments)]
fn chunk_head_forward<T: Element>(
    q: &[T],
    k: &[T],
    v: &[T],
    out: &mut [T],
    mut weights: Option<&mut [T]>,
    n: usize,
    d: usize,
    w: usize,
    q_shift: usize,
    kv_shift: usize,
    causal: bool,
    scale: T,
) {
    let m = n / w;
    let mut scores = scratch_buf::<T>(w * w);
    for c in 0..m {
        for i in 0..w {
            let oq = (c * w + i + n - q_shift) % n;
            let q_row = &q[oq * d..(oq + 1) * d];
            for j in 0..w {
                let ok = (c * w + j + n - kv_shift) % n;
                scores[i * w + j] = dot(q_row, &k[ok * d..(ok + 1) * d]);
            }
        }
        ma_count::tally((w * w * d) as u64);
        if causal {
            for i in 0..w {
                let oq = (c * w + i + n - q_shift) % n;
                for j in 0..w {
                    let ok = (c * w + j + n - kv_shift) % n;
                    if ok > oq {
                        scores[i * w + j] = T::mask_sentinel();
                    }
                }
            }
        }
        for i in 0..w {
            softmax_row_in_place(&mut scores[i * w..(i + 1) * w], scale);
        }
        if let Some(buf) = weights.as_deref_mut() {
            buf[c * w * w..(c + 1) * w * w].copy_from_slice(&scores);
        }
        for i in 0..w {
            let oq = (c * w + i + n - q_shift) % n;
            let out_row = &mut out[oq * d..(oq + 1) * d];
            for j in 0..w {
                let p = scores[i * w + j];
                let ok = (c * w + j + n - kv_shift) % n;
                let v_row = &v[ok * d..(ok + 1) * d];
                for dd in 0..d {
                    out_row[dd] = out_row[dd] + p * v_row[dd];
                }
            }
        }
        ma_count::tally((w * w * d) as u64);
    }
}

/// One dilated head for one (batch, head) pair: gather the selected
/// rows, run dense attention among them, scatter outputs back. Rows
/// outside the selection stay zero.
#[allow(clippy::too_many_arguments)]
fn dilated_head_forward<T: Element>(
    q: &[T],
    k: &[T],
    v: &[T],
    out: &mut [T],
    weights: Option<&mut [T]>,
    d: usize,
    idx: &[usize],
    causal: bool,
    scale: T,
) {
    let ns = idx.len();
    let mut gq = scratch_buf::<T>(ns * d);
    let mut gk = scratch_buf::<T>(ns * d);
    let mut gv = scratch_buf::<T>(ns * d);
    for (row, &j) in idx.iter().enumerate() {
        gq[row * d..(row + 1) * d].copy_from_slice(&q[j * d..(j + 1) * d]);
        gk[row * d..(row + 1) * d].copy_from_slice(&k[j * d..(j + 1) * d]);
        gv[row * d..(row + 1) * d].copy_from_slice(&v[j * d..(j + 1) * d]);
    }
    let mut scores = scratch_buf::<T>(ns * ns);
    for a in 0..ns {
        let q_row = &gq[a * d..(a + 1) * d];
        for b in 0..ns {
            scores[a * ns + b] = dot(q_row, &gk[b * d..(b + 1) * d]);
        }
    }
    ma_count::tally((ns * ns * d) as u64);
    if causal {
        // idx is increasing, so causality is triangular in gathered space
        for a in 0..ns {
            for b in (a + 1)..ns {
                scores[a * ns + b] = T::mask_sentinel();
            }
        }
    }
    for a in 0..ns {
        softmax_row_in_place(&mut scores[a * ns..(a + 1) * ns], scale);
    }
    if let Some(buf) = weights {
        buf.copy_from_slice(&scores);
    }
    for a in 0..ns {
        let oq = idx[a];
        let out_row = &mut out[oq * d..(oq + 1) * d];
        for b in 0..ns {
            let p = scores[a * ns + b];
            let v_row = &gv[b * d..(b + 1) * d];
            for dd in 0..d {
                out_row[dd] = out_row[dd] + p * v_row[dd];
            }
        }
    }
    ma_count::tally((ns * ns * d) as u64);
}

fn validate_execs(execs: &[HeadExec], n: usize, window: usize) -> Result<()> {
    for exec in execs {
        match *exec {
            HeadExec::Chunk { q_shift, kv_shift } => {
                if window == 0 || n % window != 0 {
                    return Err(Error::config(format!(
                        "window {window} does not divide seq_len {n}"
                    )));
                }
                if q_shift >= n || kv_shift >= n {
                    return Err(Error::config(format!(
                        "shift ({q_shift}, {kv_shift}) must be < seq_len {n}"
                    )));
                }
            }
            HeadExec::Dilated { theta, offset } => {
                if theta == 0 || theta > n {
                    return Err(Error::config(format!(
                        "dilation {theta} must be in [1, seq_len {n}]"
                    )));
                }
                if n % theta != 0 {
                    return Err(Error::config(format!(
                        "dilation {theta} does not divide seq_len {n}"
                    )));
                }
                if offset == 0 || offset > theta {
                    return Err(Error::config(format!(
                        "dilation offset {offset} must be in [1, {theta}]"
                    )));
                }
            }
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_heads<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    execs: &[HeadExec],
    window: usize,
    causal: bool,
    save: bool,
    parallel: bool,
) -> Result<AttnOutput<T>> {
    let [b_sz, h, n, d] = validate_triple(q, k, v)?;
    if execs.len() != h {
        return Err(Error::config(format!(
            "{} head recipes for {h} heads",
            execs.len()
        )));
    }
    validate_execs(execs, n, window)?;
    let scale = T::from_f64(1.0 / (d as f64).sqrt());
    let mut out = Tensor::zeros(&[b_sz, h, n, d]);
    let block = n * d;

    if save {
        let mut heads = Vec::with_capacity(h);
        for (i, exec) in execs.iter().enumerate() {
            match *exec {
                HeadExec::Chunk { q_shift, kv_shift } => {
                    let m = n / window;
                    let mut weights = Tensor::zeros(&[b_sz, m, window, window]);
                    let wlen = m * window * window;
                    for b in 0..b_sz {
                        let off = (b * h + i) * block;
                        chunk_head_forward(
                            &q.data()[off..off + block],
                            &k.data()[off..off + block],
                            &v.data()[off..off + block],
                            &mut out.data_mut()[off..off + block],
                            Some(&mut weights.data_mut()[b * wlen..(b + 1) * wlen]),
                            n,
                            d,
                            window,
                            q_shift,
                            kv_shift,
                            causal,
                            scale,
                        );
                    }
                    heads.push(SavedHead::Chunk {
                        q_shift,
                        kv_shift,
                        weights,
                    });
                }
                HeadExec::Dilated { theta, offset } => {
                    let idx = dilated_indices(n, theta, offset);
                    let ns = idx.len();
                    let mut weights = Tensor::zeros(&[b_sz, ns, ns]);
                    for b in 0..b_sz {
                        let off = (b * h + i) * block;
                        dilated_head_forward(
                            &q.data()[off..off + block],
                            &k.data()[off..off + block],
                            &v.data()[off..off + block],
                            &mut out.data_mut()[off..off + block],
                            Some(&mut weights.data_mut()[b * ns * ns..(b + 1) * ns * ns]),
                            d,
                            &idx,
                            causal,
                            scale,
                        );
                    }
                    heads.push(SavedHead::Dilated {
                        theta,
                        offset,
                        weights,
                    });
                }
            }
        }
        return Ok(AttnOutput {
            out,
            saved: Some(Saved {
                shape: [b_sz, h, n, d],
                window,
                causal,
                heads,
            }),
        });
    }

    let qd = q.data();
    let kd = k.data();
    let vd = v.data();
    let run_one = |bh: usize, out_block: &mut [T]| {
        let i = bh % h;
        let off = bh * block;
        match execs[i] {
            HeadExec::Chunk { q_shift, kv_shift } => chunk_head_forward(
                &qd[off..off + block],
                &kd[off..off + block],
                &vd[off..off + block],
                out_block,
                None,
                n,
                d,
                window,
                q_shift,
                kv_shift,
                causal,
                scale,
            ),
            HeadExec::Dilated { theta, offset } => {
                let idx = dilated_indices(n, theta, offset);
                dilated_head_forward(
                    &qd[off..off + block],
                    &kd[off..off + block],
                    &vd[off..off + block],
                    out_block,
                    None,
                    d,
                    &idx,
                    causal,
                    scale,
                );
            }
        }
    };
    if parallel {
        // (batch, head) blocks are disjoint; results are bit-identical
        // to the serial order regardless of schedule.
        out.data_mut()
            .par_chunks_mut(block)
            .enumerate()
            .for_each(|(bh, out_block)| run_one(bh, out_block));
    } else {
        for (bh, out_block) in out.data_mut().chunks_mut(block).enumerate() {
            run_one(bh, out_block);
        }
    }
    Ok(AttnOutput { out, saved: None })
}

/// Standard dense softmax attention, scale `1 / sqrt(D)`.
pub fn full_attention<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    causal: bool,
    save: bool,
) -> Result<AttnOutput<T>> {
    let [_, h, n, _] = validate_triple(q, k, v)?;
    let execs = vec![HeadExec::Dilated { theta: 1, offset: 1 }; h];
    run_heads(q, k, v, &execs, n, causal, save, false)
}

/// Block-diagonal attention within non-overlapping chunks of `w` tokens.
pub fn chunked_attention<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    w: usize,
    causal: bool,
    save: bool,
) -> Result<AttnOutput<T>> {
    let [b, h, n, d] = validate_triple(q, k, v)?;
    let cfg = AttnConfig::new(b, h, n, d, w, causal)?;
    let (execs, window) = lower_spec(&PatternSpec::Local { window: w }, &cfg)?;
    run_heads(q, k, v, &execs, window, causal, save, false)
}

/// Half the heads attend locally, half against keys/values rolled
/// right by half a chunk.
pub fn scca_fixed<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    w: usize,
    causal: bool,
    save: bool,
) -> Result<AttnOutput<T>> {
    let [b, h, n, d] = validate_triple(q, k, v)?;
    let cfg = AttnConfig::new(b, h, n, d, w, causal)?;
    let (execs, window) = lower_spec(&PatternSpec::SccaFixed { window: w }, &cfg)?;
    run_heads(q, k, v, &execs, window, causal, save, false)
}

/// Head group `i` attends against keys/values rolled right by `i * w`,
/// so the heads jointly cover every chunk.
pub fn scca_flow<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    w: usize,
    causal: bool,
    save: bool,
) -> Result<AttnOutput<T>> {
    let [b, h, n, d] = validate_triple(q, k, v)?;
    let cfg = AttnConfig::new(b, h, n, d, w, causal)?;
    let (execs, window) = lower_spec(&PatternSpec::SccaFlow { window: w }, &cfg)?;
    run_heads(q, k, v, &execs, window, causal, save, false)
}

/// Baseline that rolls queries, keys, and values together by half a
/// chunk in half the heads, moving the window partition itself.
pub fn s2_baseline<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    w: usize,
    causal: bool,
    save: bool,
) -> Result<AttnOutput<T>> {
    let [b, h, n, d] = validate_triple(q, k, v)?;
    let cfg = AttnConfig::new(b, h, n, d, w, causal)?;
    let (execs, window) = lower_spec(&PatternSpec::S2 { window: w }, &cfg)?;
    run_heads(q, k, v, &execs, window, causal, save, false)
}

/// Shifted dilated attention: the head with offset `s` attends among
/// positions congruent to `s - 1` mod `theta`; offsets cycle across
/// heads. Unselected query rows are zero in that head.
pub fn sda<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    theta: usize,
    causal: bool,
    save: bool,
) -> Result<AttnOutput<T>> {
    let [b, h, n, d] = validate_triple(q, k, v)?;
    let cfg = AttnConfig::new(b, h, n, d, n, causal)?;
    let (execs, window) = lower_spec(&PatternSpec::Sda { theta }, &cfg)?;
    run_heads(q, k, v, &execs, window, causal, save, false)
}

/// Dispatch each head to its own plan.
pub fn mixed_attention<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    plans: &[HeadPlan],
    w: usize,
    causal: bool,
    save: bool,
) -> Result<AttnOutput<T>> {
    let [b, h, n, d] = validate_triple(q, k, v)?;
    let cfg = AttnConfig::new(b, h, n, d, w, causal)?;
    let spec = PatternSpec::LongMixed {
        window: w,
        plans: plans.to_vec(),
    };
    let (execs, window) = lower_spec(&spec, &cfg)?;
    run_heads(q, k, v, &execs, window, causal, save, false)
}

/// Run whichever kernel a pattern calls for. Shapes must match `cfg`.
pub fn forward_spec<T: Element>(
    spec: &PatternSpec,
    cfg: &AttnConfig,
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    save: bool,
    parallel: bool,
) -> Result<AttnOutput<T>> {
    let dims = validate_triple(q, k, v)?;
    if dims != [cfg.batch, cfg.heads, cfg.seq_len, cfg.head_dim] {
        return Err(Error::ShapeMismatch {
            op: "forward_spec",
            lhs: dims.to_vec(),
            rhs: vec![cfg.batch, cfg.heads, cfg.seq_len, cfg.head_dim],
        });
    }
    let (execs, window) = lower_spec(spec, cfg)?;
    run_heads(q, k, v, &execs, window, cfg.causal, save, parallel)
}

/// Gradients of `sum(d_out * out)` with respect to Q, K, V, using the
/// attention weights captured by the matching forward call.
pub fn backward<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    d_out: &Tensor<T>,
    saved: &Saved<T>,
) -> Result<AttnGrads<T>> {
    let dims = validate_triple(q, k, v)?;
    if d_out.shape() != q.shape() {
        return Err(Error::ShapeMismatch {
            op: "backward",
            lhs: d_out.shape().to_vec(),
            rhs: q.shape().to_vec(),
        });
    }
    if !d_out.is_all_finite() {
        return Err(Error::Numeric("non-finite value in output gradient".into()));
    }
    if dims != saved.shape {
        return Err(Error::State(format!(
            "saved activations are for shape {:?} but inputs have shape {:?}",
            saved.shape, dims
        )));
    }
    if saved.heads.len() != dims[1] {
        return Err(Error::State(format!(
            "saved activations hold {} heads but inputs have {}",
            saved.heads.len(),
            dims[1]
        )));
    }
    let [b_sz, h, n, d] = dims;
    let w = saved.window;
    let scale = T::from_f64(1.0 / (d as f64).sqrt());
    let mut dq = Tensor::zeros(q.shape());
    let mut dk = Tensor::zeros(q.shape());
    let mut dv = Tensor::zeros(q.shape());
    let block = n * d;

    for (i, head) in saved.heads.iter().enumerate() {
        match head {
            SavedHead::Chunk {
                q_shift,
                kv_shift,
                weights,
            } => {
                let m = n / w;
                if weights.shape() != [b_sz, m, w, w] {
                    return Err(Error::State(format!(
                        "chunk weights have shape {:?}, expected {:?}",
                        weights.shape(),
                        [b_sz, m, w, w]
                    )));
                }
                let wlen = m * w * w;
                for b in 0..b_sz {
                    let off = (b * h + i) * block;
                    chunk_head_backward(
                        &q.data()[off..off + block],
                        &k.data()[off..off + block],
                        &v.data()[off..off + block],
                        &d_out.data()[off..off + block],
                        &weights.data()[b * wlen..(b + 1) * wlen],
                        &mut dq.data_mut()[off..off + block],
                        &mut dk.data_mut()[off..off + block],
                        &mut dv.data_mut()[off..off + block],
                        n,
                        d,
                        w,
                        *q_shift,
                        *kv_shift,
                        scale,
                    );
                }
            }
            SavedHead::Dilated {
                theta,
                offset,
                weights,
            } => {
                let idx = dilated_indices(n, *theta, *offset);
                let ns = idx.len();
                if weights.shape() != [b_sz, ns, ns] {
                    return Err(Error::State(format!(
                        "dilated weights have shape {:?}, expected {:?}",
                        weights.shape(),
                        [b_sz, ns, ns]
                    )));
                }
                for b in 0..b_sz {
                    let off = (b * h + i) * block;
                    dilated_head_backward(
                        &q.data()[off..off + block],
                        &k.data()[off..off + block],
                        &v.data()[off..off + block],
                        &d_out.data()[off..off + block],
                        &weights.data()[b * ns * ns..(b + 1) * ns * ns],
                        &mut dq.data_mut()[off..off + block],
                        &mut dk.data_mut()[off..off + block],
                        &mut dv.data_mut()[off..off + block],
                        d,
                        &idx,
                        scale,
                    );
                }
            }
        }
    }
    Ok(AttnGrads { dq, dk, dv })
}

/// Softmax-attention backward for one chunked head. With weights `P`,
/// upstream `dO`, and pre-softmax scale `s`:
/// `dV = P^T dO`, `dP = dO V^T`, `dS = P (dP - rowsum(P dP))`,
/// `dQ = s dS K`, `dK = s dS^T Q`. Masked entries carry `P = 0` and
/// drop out of every term.
#[allow(clippy::too_many_arguments)]
fn chunk_head_backward<T: Element>(
    q: &[T],
    k: &[T],
    v: &[T],
    d_out: &[T],
    weights: &[T],
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
    n: usize,
    d: usize,
    w: usize,
    q_shift: usize,
    kv_shift: usize,
    scale: T,
) {
    let m = n / w;
    let mut dp = scratch_buf::<T>(w);
    for c in 0..m {
        for i in 0..w {
            let oq = (c * w + i + n - q_shift) % n;
            let dout_row = &d_out[oq * d..(oq + 1) * d];
            let p_row = &weights[(c * w + i) * w..(c * w + i + 1) * w];
            let mut delta = T::zero();
            for j in 0..w {
                let ok = (c * w + j + n - kv_shift) % n;
                dp[j] = dot(dout_row, &v[ok * d..(ok + 1) * d]);
                delta = delta + p_row[j] * dp[j];
            }
            let q_row = &q[oq * d..(oq + 1) * d];
            for j in 0..w {
                let ok = (c * w + j + n - kv_shift) % n;
                let ds = p_row[j] * (dp[j] - delta) * scale;
                let k_row = &k[ok * d..(ok + 1) * d];
                for dd in 0..d {
                    dq[oq * d + dd] = dq[oq * d + dd] + ds * k_row[dd];
                    dk[ok * d + dd] = dk[ok * d + dd] + ds * q_row[dd];
                    dv[ok * d + dd] = dv[ok * d + dd] + p_row[j] * dout_row[dd];
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn dilated_head_backward<T: Element>(
    q: &[T],
    k: &[T],
    v: &[T],
    d_out: &[T],
    weights: &[T],
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
    d: usize,
    idx: &[usize],
    scale: T,
) {
    let ns = idx.len();
    let mut dp = scratch_buf::<T>(ns);
    for a in 0..ns {
        let oq = idx[a];
        let dout_row = &d_out[oq * d..(oq + 1) * d];
        let p_row = &weights[a * ns..(a + 1) * ns];
        let mut delta = T::zero();
        for b in 0..ns {
            let ok = idx[b];
            dp[b] = dot(dout_row, &v[ok * d..(ok + 1) * d]);
            delta = delta + p_row[b] * dp[b];
        }
        let q_row = &q[oq * d..(oq + 1) * d];
        for b in 0..ns {
            let ok = idx[b];
            let ds = p_row[b] * (dp[b] - delta) * scale;
            let k_row = &k[ok * d..(ok + 1) * d];
            for dd in 0..d {
                dq[oq * d + dd] = dq[oq * d + dd] + ds * k_row[dd];
                dk[ok * d + dd] = dk[ok * d + dd] + ds * q_row[dd];
                dv[ok * d + dd] = dv[ok * d + dd] + p_row[b] * dout_row[dd];
            }
        }
    }
}
