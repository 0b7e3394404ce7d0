//! Training objectives: identity classification per embedding slot,
//! hardest-negative triplet margin ranking, and the commonality-based margin
//! ranking (CMR) loss for fine embeddings.
//!
//! Commonality is the normalized entropy of a fine embedding's identity
//! classification scores. It is high for body parts shared across many
//! identities, and the CMR loss shrinks the ranking margin by `1 - C` so
//! such parts are not forced apart just because their person ids differ.
//! Commonality enters the margin with its gradient stopped (a schedule
//! signal, not a trainable pathway); a config flag can let gradients flow
//! for experimentation.

use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingVars;
use crate::error::{Error, Result};
use crate::graph::{Tape, Var};

/// Loss switches and the ranking margin.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LossConfig {
    /// Ranking margin alpha.
    pub margin: f64,
    /// Keep the commonality signal out of the gradient (default true).
    pub commonality_stop_gradient: bool,
    /// Exclude candidates sharing the anchor's identity from hardest-negative
    /// selection (default true; person ids admit multiple positives).
    pub exclude_same_identity: bool,
    /// Include coarse embeddings in losses.
    pub use_coarse: bool,
    /// Include fine embeddings in losses.
    pub use_fine: bool,
    /// Align fine embeddings with the CMR loss instead of the plain ranking
    /// loss.
    pub use_cmr: bool,
    /// Ablation variant: apply CMR to coarse slots as well.
    pub cmr_on_coarse: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin: 0.2,
            commonality_stop_gradient: true,
            exclude_same_identity: true,
            use_coarse: true,
            use_fine: true,
            use_cmr: true,
            cmr_on_coarse: false,
        }
    }
}

/// Graph handles to the per-slot identity classifiers (each `(d, c)`).
/// The image and text paths must receive the *same* handles; sharing is what
/// pulls the modalities together. With a single shared classifier all
/// entries alias one node.
#[derive(Clone)]
pub struct ClassifierVars {
    pub global: Var,
    pub coarse: Vec<Var>,
    pub fine: Vec<Var>,
}

/// One mini-batch on a tape: matched image/text embedding sets plus identity
/// labels (pair k shares labels[k]).
pub struct BatchVars {
    pub visual: Vec<EmbeddingVars>,
    pub text: Vec<EmbeddingVars>,
    pub labels: Vec<u32>,
}

/// Identity classification scores collected while computing the ID loss,
/// kept for commonality estimation.
pub struct SlotScores {
    pub global: Vec<f64>,
    pub coarse: Vec<Vec<f64>>,
    pub fine: Vec<Vec<f64>>,
    pub coarse_logits: Vec<Var>,
    pub fine_logits: Vec<Var>,
}

// ---------------------------------------------------------------------------
// Cosine similarity
// ---------------------------------------------------------------------------

/// Cosine similarity on raw values. Errors on a zero-norm side.
pub fn cosine_value(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm("cosine_value".to_string()));
    }
    let dot = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    Ok(dot / (na * nb))
}

/// Cosine similarity as a graph node: dot(a, b) / (|a| |b|).
pub fn cosine_graph(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let (va, vb) = (tape.value(a), tape.value(b));
    if va.shape() != vb.shape() {
        return Err(Error::ShapeMismatch {
            context: "cosine".to_string(),
            expected: va.shape().to_vec(),
            got: vb.shape().to_vec(),
        });
    }
    let norm_a_sq: f64 = va.data().iter().map(|v| v * v).sum();
    let norm_b_sq: f64 = vb.data().iter().map(|v| v * v).sum();
    if norm_a_sq == 0.0 || norm_b_sq == 0.0 {
        return Err(Error::ZeroNorm("cosine".to_string()));
    }
    let ab = tape.mul(a, b)?;
    let dot = tape.sum_all(ab);
    let aa = tape.mul(a, a)?;
    let saa = tape.sum_all(aa);
    let na = tape.sqrt(saa);
    let bb = tape.mul(b, b)?;
    let sbb = tape.sum_all(bb);
    let nb = tape.sqrt(sbb);
    let denom = tape.mul(na, nb)?;
    tape.div(dot, denom)
}

// ---------------------------------------------------------------------------
// Identity classification
// ---------------------------------------------------------------------------

/// Cross entropy of softmax(e W) against the identity label. Returns the
/// loss node, the raw logits node, and the detached classification scores.
pub fn id_loss(tape: &mut Tape, e: Var, label: usize, classifier: Var) -> Result<(Var, Var, Vec<f64>)> {
    let classes = tape.value(classifier).cols();
    if label >= classes {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let logits = tape.vecmat(e, classifier)?;
    let loss = tape.cross_entropy_logits(logits, label)?;
    let scores = tape.softmax_value(logits);
    Ok((loss, logits, scores))
}

/// Total identity loss of one embedding set: the global term plus the means
/// over coarse and fine slots (means keep the balance stable when D or P
/// change). Returns the per-slot classification scores alongside.
pub fn id_loss_set(
    tape: &mut Tape,
    set: &EmbeddingVars,
    label: usize,
    classifiers: &ClassifierVars,
) -> Result<(Var, SlotScores)> {
    let (mut total, _, global_scores) = id_loss(tape, set.global, label, classifiers.global)?;

    let mut coarse_scores = Vec::with_capacity(set.coarse.len());
    let mut coarse_logits = Vec::with_capacity(set.coarse.len());
    if !set.coarse.is_empty() {
        let mut sum: Option<Var> = None;
        for (i, &c) in set.coarse.iter().enumerate() {
            let (l, lg, p) = id_loss(tape, c, label, classifiers.coarse[i])?;
            coarse_scores.push(p);
            coarse_logits.push(lg);
            sum = Some(match sum {
                None => l,
                Some(s) => tape.add(s, l)?,
            });
        }
        let mean = tape.scale(sum.unwrap(), 1.0 / set.coarse.len() as f64);
        total = tape.add(total, mean)?;
    }

    let mut fine_scores = Vec::with_capacity(set.fine.len());
    let mut fine_logits = Vec::with_capacity(set.fine.len());
    if !set.fine.is_empty() {
        let mut sum: Option<Var> = None;
        for (j, &f) in set.fine.iter().enumerate() {
            let (l, lg, p) = id_loss(tape, f, label, classifiers.fine[j])?;
            fine_scores.push(p);
            fine_logits.push(lg);
            sum = Some(match sum {
                None => l,
                Some(s) => tape.add(s, l)?,
            });
        }
        let mean = tape.scale(sum.unwrap(), 1.0 / set.fine.len() as f64);
        total = tape.add(total, mean)?;
    }

    Ok((
        total,
        SlotScores {
            global: global_scores,
            coarse: coarse_scores,
            fine: fine_scores,
            coarse_logits,
            fine_logits,
        },
    ))
}

// ---------------------------------------------------------------------------
// Hardest negatives and ranking losses
// ---------------------------------------------------------------------------

/// Pick the in-batch hardest negative for `anchor`: the candidate with the
/// highest similarity whose identity differs (ties resolve to the lowest
/// index). `sim_row[j]` is the anchor's similarity to candidate j; `labels`
/// covers both anchors and candidates.
pub fn hardest_negative(
    anchor: usize,
    sim_row: &[f64],
    labels: &[u32],
    exclude_same_identity: bool,
) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (j, &s) in sim_row.iter().enumerate() {
        if j == anchor {
            continue;
        }
        if exclude_same_identity && labels[j] == labels[anchor] {
            continue;
        }
        if best.is_none_or(|(_, bs)| s > bs) {
            best = Some((j, s));
        }
    }
    best.map(|(j, _)| j).ok_or(Error::NoValidNegative { anchor })
}

/// Hinge terms over one slot with per-sample margin nodes:
/// sum_k [m_v^k - s(v_k, t_k) + s(v_k, t_h)]_+ + [m_t^k - s(t_k, v_k) + s(t_k, v_h)]_+
fn ranking_terms(
    tape: &mut Tape,
    visual: &[Var],
    text: &[Var],
    labels: &[u32],
    margins_v: &[Var],
    margins_t: &[Var],
    exclude_same_identity: bool,
) -> Result<Var> {
    let n = visual.len();
    assert_eq!(text.len(), n);
    assert_eq!(labels.len(), n);

    // Value-level similarity matrix for hardest-negative selection;
    // sims[k][j] = s(v_k, t_j). Cosine is symmetric, so the text-anchor
    // direction reads the transpose.
    let mut sims = vec![vec![0.0; n]; n];
    for k in 0..n {
        for j in 0..n {
            sims[k][j] = cosine_value(
                tape.value(visual[k]).data(),
                tape.value(text[j]).data(),
            )?;
        }
    }

    let mut total = tape.scalar(0.0);
    for k in 0..n {
        let h_text = hardest_negative(k, &sims[k], labels, exclude_same_identity)?;
        let col: Vec<f64> = (0..n).map(|j| sims[j][k]).collect();
        let h_vis = hardest_negative(k, &col, labels, exclude_same_identity)?;

        let pos = cosine_graph(tape, visual[k], text[k])?;
        let neg_t = cosine_graph(tape, visual[k], text[h_text])?;
        let neg_v = cosine_graph(tape, text[k], visual[h_vis])?;

        let d1 = tape.sub(margins_v[k], pos)?;
        let d1 = tape.add(d1, neg_t)?;
        let h1 = tape.relu(d1);
        total = tape.add(total, h1)?;

        let d2 = tape.sub(margins_t[k], pos)?;
        let d2 = tape.add(d2, neg_v)?;
        let h2 = tape.relu(d2);
        total = tape.add(total, h2)?;
    }
    Ok(total)
}

/// Triplet margin ranking loss with in-batch hardest negatives, summed over
/// both retrieval directions.
pub fn ranking_loss(
    tape: &mut Tape,
    visual: &[Var],
    text: &[Var],
    labels: &[u32],
    margin: f64,
    exclude_same_identity: bool,
) -> Result<Var> {
    let margins: Vec<Var> = (0..visual.len()).map(|_| tape.scalar(margin)).collect();
    ranking_terms(
        tape,
        visual,
        text,
        labels,
        &margins,
        &margins,
        exclude_same_identity,
    )
}

/// Ranking loss over an embedding-set batch: the global slot plus the mean
/// over coarse slots. Fine slots are excluded here by definition.
pub fn ranking_loss_sets(
    tape: &mut Tape,
    batch: &BatchVars,
    margin: f64,
    include_coarse: bool,
    exclude_same_identity: bool,
) -> Result<Var> {
    let globals_v: Vec<Var> = batch.visual.iter().map(|s| s.global).collect();
    let globals_t: Vec<Var> = batch.text.iter().map(|s| s.global).collect();
    let mut total = ranking_loss(
        tape,
        &globals_v,
        &globals_t,
        &batch.labels,
        margin,
        exclude_same_identity,
    )?;

    let num_coarse = batch.visual.first().map_or(0, |s| s.coarse.len());
    if include_coarse && num_coarse > 0 {
        let mut sum: Option<Var> = None;
        for i in 0..num_coarse {
            let cv: Vec<Var> = batch.visual.iter().map(|s| s.coarse[i]).collect();
            let ct: Vec<Var> = batch.text.iter().map(|s| s.coarse[i]).collect();
            let l = ranking_loss(tape, &cv, &ct, &batch.labels, margin, exclude_same_identity)?;
            sum = Some(match sum {
                None => l,
                Some(s) => tape.add(s, l)?,
            });
        }
        let mean = tape.scale(sum.unwrap(), 1.0 / num_coarse as f64);
        total = tape.add(total, mean)?;
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Commonality and the CMR loss
// ---------------------------------------------------------------------------

/// Normalized entropy of a classification score distribution, in [0, 1].
/// Uniform scores give 1, one-hot scores give 0; requires at least 2 classes.
pub fn commonality(scores: &[f64]) -> Result<f64> {
    let c = scores.len();
    if c < 2 {
        return Err(Error::TooFewClasses(c));
    }
    let mut entropy = 0.0;
    for &p in scores {
        if p > 0.0 {
            entropy -= p * p.ln();
        }
    }
    Ok(entropy / (c as f64).ln())
}

/// Commonality as a graph node (used when the stop-gradient flag is off):
/// -sum(p log p) / log(c) with p = softmax(logits).
pub fn commonality_graph(tape: &mut Tape, logits: Var) -> Result<Var> {
    let c = tape.value(logits).len();
    if c < 2 {
        return Err(Error::TooFewClasses(c));
    }
    let row = tape.reshape(logits, vec![1, c]);
    let p = tape.softmax_rows(row, None)?;
    let lp = tape.log(p);
    let plp = tape.mul(p, lp)?;
    let s = tape.sum_all(plp);
    Ok(tape.scale(s, -1.0 / (c as f64).ln()))
}

/// Per-sample, per-slot commonality margins as graph nodes: leaf constants
/// when detached (the default) so no gradient flows through the margin.
pub enum CommonalityInput {
    /// Detached values, shape [sample][slot].
    Fixed(Vec<Vec<f64>>),
    /// Graph nodes (gradients flow), shape [sample][slot].
    Graph(Vec<Vec<Var>>),
}

impl CommonalityInput {
    fn node(&self, tape: &mut Tape, sample: usize, slot: usize) -> Var {
        match self {
            CommonalityInput::Fixed(v) => tape.scalar(v[sample][slot]),
            CommonalityInput::Graph(v) => v[sample][slot],
        }
    }

    fn value(&self, tape: &Tape, sample: usize, slot: usize) -> f64 {
        match self {
            CommonalityInput::Fixed(v) => v[sample][slot],
            CommonalityInput::Graph(v) => tape.value(v[sample][slot]).item(),
        }
    }
}

/// Commonality-based margin ranking loss over fine slots: per slot j and
/// sample k the margin shrinks to `alpha * (1 - C)`, both retrieval
/// directions are summed, and the result is the mean over slots. With C
/// forced to zero this reduces exactly to [`ranking_loss`] per slot.
#[allow(clippy::too_many_arguments)]
pub fn cmr_loss(
    tape: &mut Tape,
    fine_v: &[Vec<Var>],
    fine_t: &[Vec<Var>],
    labels: &[u32],
    margin: f64,
    comm_v: &CommonalityInput,
    comm_t: &CommonalityInput,
    exclude_same_identity: bool,
) -> Result<Var> {
    let n = fine_v.len();
    let slots = fine_v.first().map_or(0, |f| f.len());
    if slots == 0 {
        return Ok(tape.scalar(0.0));
    }
    let mut sum: Option<Var> = None;
    for j in 0..slots {
        let sv: Vec<Var> = fine_v.iter().map(|f| f[j]).collect();
        let st: Vec<Var> = fine_t.iter().map(|f| f[j]).collect();
        let mut margins_v = Vec::with_capacity(n);
        let mut margins_t = Vec::with_capacity(n);
        for k in 0..n {
            margins_v.push(adaptive_margin(tape, margin, comm_v, k, j));
            margins_t.push(adaptive_margin(tape, margin, comm_t, k, j));
        }
        let l = ranking_terms(
            tape,
            &sv,
            &st,
            labels,
            &margins_v,
            &margins_t,
            exclude_same_identity,
        )?;
        sum = Some(match sum {
            None => l,
            Some(s) => tape.add(s, l)?,
        });
    }
    Ok(tape.scale(sum.unwrap(), 1.0 / slots as f64))
}

/// alpha * (1 - C) as a graph node.
fn adaptive_margin(
    tape: &mut Tape,
    alpha: f64,
    comm: &CommonalityInput,
    sample: usize,
    slot: usize,
) -> Var {
    let one = tape.scalar(1.0);
    let c = comm.node(tape, sample, slot);
    let gap = tape.sub(one, c).expect("scalar shapes");
    tape.scale(gap, alpha)
}

// ---------------------------------------------------------------------------
// Total loss
// ---------------------------------------------------------------------------

/// Per-term values of one total-loss evaluation, for logging.
#[derive(Clone, Debug, Serialize)]
pub struct LossBreakdown {
    pub id_visual: f64,
    pub id_text: f64,
    pub ranking: f64,
    pub cmr: f64,
    pub total: f64,
    /// Batch-mean commonality per fine slot (visual / text), empty when fine
    /// embeddings are disabled.
    pub fine_commonality_visual: Vec<f64>,
    pub fine_commonality_text: Vec<f64>,
}

/// Fixed commonality values injected by verification code (the
/// finite-difference oracle freezes C to respect the stop-gradient).
pub struct FrozenCommonality {
    pub fine_visual: Vec<Vec<f64>>,
    pub fine_text: Vec<Vec<f64>>,
    pub coarse_visual: Vec<Vec<f64>>,
    pub coarse_text: Vec<Vec<f64>>,
}

/// Total training objective:
/// identity losses of both modalities, the ranking loss over global and
/// coarse slots, and the CMR loss over fine slots (plain ranking instead
/// when CMR is off; coarse slots move under CMR in the cmr_on_coarse
/// variant). ID terms are batch means; ranking/CMR sum over the batch.
pub fn total_loss(
    tape: &mut Tape,
    batch: &BatchVars,
    cfg: &LossConfig,
    classifiers: &ClassifierVars,
) -> Result<(Var, LossBreakdown)> {
    total_loss_impl(tape, batch, cfg, classifiers, None)
}

/// [`total_loss`] with commonality frozen to caller-supplied values.
pub fn total_loss_frozen_commonality(
    tape: &mut Tape,
    batch: &BatchVars,
    cfg: &LossConfig,
    classifiers: &ClassifierVars,
    frozen: &FrozenCommonality,
) -> Result<(Var, LossBreakdown)> {
    total_loss_impl(tape, batch, cfg, classifiers, Some(frozen))
}

fn total_loss_impl(
    tape: &mut Tape,
    batch: &BatchVars,
    cfg: &LossConfig,
    classifiers: &ClassifierVars,
    frozen: Option<&FrozenCommonality>,
) -> Result<(Var, LossBreakdown)> {
    let n = batch.visual.len();
    assert!(n > 0 && batch.text.len() == n && batch.labels.len() == n);

    // Identity terms summed over the batch, matching the ranking terms'
    // batch-sum reduction so the four terms stay balanced at any N.
    let mut id_v_sum: Option<Var> = None;
    let mut id_t_sum: Option<Var> = None;
    let mut scores_v = Vec::with_capacity(n);
    let mut scores_t = Vec::with_capacity(n);
    for k in 0..n {
        let label = batch.labels[k] as usize;
        let (lv, sv) = id_loss_set(tape, &batch.visual[k], label, classifiers)?;
        let (lt, st) = id_loss_set(tape, &batch.text[k], label, classifiers)?;
        id_v_sum = Some(match id_v_sum {
            None => lv,
            Some(s) => tape.add(s, lv)?,
        });
        id_t_sum = Some(match id_t_sum {
            None => lt,
            Some(s) => tape.add(s, lt)?,
        });
        scores_v.push(sv);
        scores_t.push(st);
    }
    let id_v = id_v_sum.unwrap();
    let id_t = id_t_sum.unwrap();

    // Ranking over global (+ coarse unless the cmr_on_coarse variant moved
    // coarse under CMR).
    let coarse_under_cmr = cfg.use_cmr && cfg.cmr_on_coarse && cfg.use_coarse;
    let rank = ranking_loss_sets(
        tape,
        batch,
        cfg.margin,
        cfg.use_coarse && !coarse_under_cmr,
        cfg.exclude_same_identity,
    )?;

    // Fine alignment: CMR or plain ranking per slot (slot mean either way).
    let num_fine = batch.visual[0].fine.len();
    let mut fine_comm_v = vec![0.0; num_fine];
    let mut fine_comm_t = vec![0.0; num_fine];
    let mut cmr = tape.scalar(0.0);
    if cfg.use_fine && num_fine > 0 {
        let fine_v: Vec<Vec<Var>> = batch.visual.iter().map(|s| s.fine.clone()).collect();
        let fine_t: Vec<Vec<Var>> = batch.text.iter().map(|s| s.fine.clone()).collect();
        if cfg.use_cmr {
            let cv = fine_commonality(tape, &scores_v, cfg, frozen.map(|f| &f.fine_visual), true)?;
            let ct = fine_commonality(tape, &scores_t, cfg, frozen.map(|f| &f.fine_text), true)?;
            for k in 0..n {
                for j in 0..num_fine {
                    fine_comm_v[j] += cv.value(tape, k, j) / n as f64;
                    fine_comm_t[j] += ct.value(tape, k, j) / n as f64;
                }
            }
            cmr = cmr_loss(
                tape,
                &fine_v,
                &fine_t,
                &batch.labels,
                cfg.margin,
                &cv,
                &ct,
                cfg.exclude_same_identity,
            )?;
        } else {
            // slot-mean of plain ranking losses, mirroring the CMR shape
            let mut sum: Option<Var> = None;
            for j in 0..num_fine {
                let sv: Vec<Var> = fine_v.iter().map(|f| f[j]).collect();
                let st: Vec<Var> = fine_t.iter().map(|f| f[j]).collect();
                let l = ranking_loss(
                    tape,
                    &sv,
                    &st,
                    &batch.labels,
                    cfg.margin,
                    cfg.exclude_same_identity,
                )?;
                sum = Some(match sum {
                    None => l,
                    Some(s) => tape.add(s, l)?,
                });
            }
            cmr = tape.scale(sum.unwrap(), 1.0 / num_fine as f64);
        }
    }

    // Table-3 variant: coarse slots under CMR too.
    if coarse_under_cmr && !batch.visual[0].coarse.is_empty() {
        let coarse_v: Vec<Vec<Var>> = batch.visual.iter().map(|s| s.coarse.clone()).collect();
        let coarse_t: Vec<Vec<Var>> = batch.text.iter().map(|s| s.coarse.clone()).collect();
        let cv = coarse_commonality(tape, &scores_v, cfg, frozen.map(|f| &f.coarse_visual))?;
        let ct = coarse_commonality(tape, &scores_t, cfg, frozen.map(|f| &f.coarse_text))?;
        let coarse_cmr = cmr_loss(
            tape,
            &coarse_v,
            &coarse_t,
            &batch.labels,
            cfg.margin,
            &cv,
            &ct,
            cfg.exclude_same_identity,
        )?;
        cmr = tape.add(cmr, coarse_cmr)?;
    }

    let sum_id = tape.add(id_v, id_t)?;
    let sum_rank = tape.add(sum_id, rank)?;
    let total = tape.add(sum_rank, cmr)?;

    let breakdown = LossBreakdown {
        id_visual: tape.value(id_v).item(),
        id_text: tape.value(id_t).item(),
        ranking: tape.value(rank).item(),
        cmr: tape.value(cmr).item(),
        total: tape.value(total).item(),
        fine_commonality_visual: fine_comm_v,
        fine_commonality_text: fine_comm_t,
    };
    Ok((total, breakdown))
}

fn fine_commonality(
    tape: &mut Tape,
    scores: &[SlotScores],
    cfg: &LossConfig,
    frozen: Option<&Vec<Vec<f64>>>,
    fine: bool,
) -> Result<CommonalityInput> {
    if let Some(fixed) = frozen {
        return Ok(CommonalityInput::Fixed(fixed.clone()));
    }
    if cfg.commonality_stop_gradient {
        let values = scores
            .iter()
            .map(|s| {
                let slot_scores = if fine { &s.fine } else { &s.coarse };
                slot_scores
                    .iter()
                    .map(|p| commonality(p))
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CommonalityInput::Fixed(values))
    } else {
        let nodes = scores
            .iter()
            .map(|s| {
                let logits = if fine { &s.fine_logits } else { &s.coarse_logits };
                logits
                    .iter()
                    .map(|&lg| commonality_graph(tape, lg))
                    .collect::<Result<Vec<Var>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CommonalityInput::Graph(nodes))
    }
}

fn coarse_commonality(
    tape: &mut Tape,
    scores: &[SlotScores],
    cfg: &LossConfig,
    frozen: Option<&Vec<Vec<f64>>>,
) -> Result<CommonalityInput> {
    fine_commonality(tape, scores, cfg, frozen, false)
}
