use crate::diffkit::{NodeId, ParamStore, Tape, Tensor};

use super::{BehaviorTable, EncodedTurn, LossMode, Pass, PolicyError, PolicyNet};

/// `G_t = R_t + gamma * G_{t+1}`, computed backwards from the last turn.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// Negative log-likelihood of each turn's composite act under the factorized
/// head, as a `T x 1` column.
pub fn nll_per_turn(tape: &mut Tape, logits: NodeId, turns: &[&EncodedTurn]) -> Result<NodeId, PolicyError> {
    let cols = tape.value(logits).cols();
    let y: Vec<Vec<f64>> = turns.iter().map(|t| t.target.clone()).collect();
    let y = Tensor::from_rows(&y);
    let not_y = y.map(|v| 1.0 - v);
    if y.cols() != cols {
        return Err(PolicyError::Config(format!("target width {} vs head width {cols}", y.cols())));
    }
    let y = tape.constant(y);
    let not_y = tape.constant(not_y);
    let pos = tape.log_sigmoid(logits);
    let neg_logits = tape.scale(logits, -1.0);
    let neg = tape.log_sigmoid(neg_logits);
    let a = tape.mul(y, pos)?;
    let b = tape.mul(not_y, neg)?;
    let ll = tape.add(a, b)?;
    let rows = tape.row_sum(ll);
    Ok(tape.scale(rows, -1.0))
}

/// Likelihood loss: mean per-turn negative log-likelihood.
pub fn ce_loss(tape: &mut Tape, net: &PolicyNet, store: &ParamStore, turns: &[&EncodedTurn]) -> Result<NodeId, PolicyError> {
    let l = net.logits(tape, store, turns, Pass::Full)?;
    let nll = nll_per_turn(tape, l, turns)?;
    Ok(tape.mean(nll))
}

/// Return-weighted likelihood loss `mean_t G_t * nll_t` on the full observation.
pub fn loss_det(
    tape: &mut Tape,
    net: &PolicyNet,
    store: &ParamStore,
    turns: &[&EncodedTurn],
    returns: &[f64],
) -> Result<NodeId, PolicyError> {
    let l = net.logits(tape, store, turns, Pass::Full)?;
    let nll = nll_per_turn(tape, l, turns)?;
    let g = tape.constant(Tensor::column(returns));
    let w = tape.mul(nll, g)?;
    Ok(tape.mean(w))
}

/// Reward-weighted likelihood summed over turns; each turn's gradient is scaled
/// by its learned reward.
pub fn sample_weighted_loss(
    tape: &mut Tape,
    net: &PolicyNet,
    store: &ParamStore,
    turns: &[&EncodedTurn],
) -> Result<NodeId, PolicyError> {
    let mut w = Vec::with_capacity(turns.len());
    for (i, t) in turns.iter().enumerate() {
        w.push(t.learned_reward.ok_or(PolicyError::MissingReward { dialogue: String::new(), turn: i })?);
    }
    let l = net.logits(tape, store, turns, Pass::Full)?;
    let nll = nll_per_turn(tape, l, turns)?;
    let w = tape.constant(Tensor::column(&w));
    let weighted = tape.mul(nll, w)?;
    Ok(tape.sum(weighted))
}

/// Behavior-table quantities for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorView {
    /// `pi_b(. | b_t)` rows over the act inventory, `T x |A|`.
    pub probs: Tensor,
    /// `sum_a pi_b log pi_b` averaged over the batch.
    pub mean_neg_entropy: f64,
    /// Inventory index of each turn's logged act.
    pub taken: Vec<usize>,
    pub taken_prob: Vec<f64>,
    /// Token membership of each inventory act, `V x |A|`.
    pub membership: Tensor,
}

pub fn behavior_view(net: &PolicyNet, table: &BehaviorTable, turns: &[&EncodedTurn]) -> Result<BehaviorView, PolicyError> {
    let mut membership = Tensor::zeros(net.acts.len(), table.len());
    for (j, act) in table.acts.iter().enumerate() {
        for tok in act {
            let k = net.act_position(tok).ok_or_else(|| PolicyError::UnknownAct(tok.to_string()))?;
            membership.set(k, j, 1.0);
        }
    }
    let mut rows = Vec::with_capacity(turns.len());
    let mut taken = Vec::with_capacity(turns.len());
    let mut taken_prob = Vec::with_capacity(turns.len());
    let mut neg_entropy = 0.0;
    for t in turns {
        let dist = table.distribution(&t.belief_key);
        let j = table
            .act_index(&t.act)
            .ok_or_else(|| PolicyError::UnknownBehaviorAct(crate::toywoz::act_key(&t.act)))?;
        if dist[j] <= 0.0 {
            return Err(PolicyError::ZeroBehavior);
        }
        neg_entropy += dist.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>();
        taken.push(j);
        taken_prob.push(dist[j]);
        rows.push(dist);
    }
    let n = turns.len().max(1) as f64;
    Ok(BehaviorView { probs: Tensor::from_rows(&rows), mean_neg_entropy: neg_entropy / n, taken, taken_prob, membership })
}

/// Nodes of the stochastic loss kept for inspection.
#[derive(Debug, Clone, Copy)]
pub struct StoTerms {
    pub loss: NodeId,
    /// Importance ratios `pi_e(a_t|b_t) / pi_b(a_t|b_t)`, `T x 1`.
    pub ratio: NodeId,
    /// Batch-mean `D_KL(pi_b || pi_e)`.
    pub kl: NodeId,
    pub penalty: NodeId,
}

/// Stochastic loss on the belief-only pass:
/// `-mean_t ratio_t * Q_t + beta * max(0, KL - eta)`.
///
/// `pi_e(a | b)` is the factorized head renormalized over the act inventory,
/// which reduces to a softmax of `logits . membership(a)`.
#[allow(clippy::too_many_arguments)]
pub fn loss_sto(
    tape: &mut Tape,
    net: &PolicyNet,
    store: &ParamStore,
    turns: &[&EncodedTurn],
    view: &BehaviorView,
    q: &[f64],
    beta: f64,
    eta: f64,
) -> Result<StoTerms, PolicyError> {
    let l = net.logits(tape, store, turns, Pass::BeliefOnly)?;
    let m = tape.constant(view.membership.clone());
    let scores = tape.matmul(l, m)?;
    let logp = tape.log_softmax(scores);
    let taken = tape.pick(logp, &view.taken)?;
    let pe = tape.exp(taken);
    let inv_pb: Vec<f64> = view.taken_prob.iter().map(|p| 1.0 / p).collect();
    let inv_pb = tape.constant(Tensor::column(&inv_pb));
    let ratio = tape.mul(pe, inv_pb)?;
    let qn = tape.constant(Tensor::column(q));
    let weighted = tape.mul(ratio, qn)?;
    let gain = tape.mean(weighted);
    let neg_gain = tape.scale(gain, -1.0);
    let pb = tape.constant(view.probs.clone());
    let cross = tape.mul(pb, logp)?;
    let cross = tape.row_sum(cross);
    let cross = tape.mean(cross);
    let neg_cross = tape.scale(cross, -1.0);
    let h = tape.constant(Tensor::scalar(view.mean_neg_entropy));
    let kl = tape.add(neg_cross, h)?;
    let eta = tape.constant(Tensor::scalar(eta));
    let excess = tape.sub(kl, eta)?;
    let hinge = tape.relu(excess);
    let penalty = tape.scale(hinge, beta);
    let loss = tape.add(neg_gain, penalty)?;
    Ok(StoTerms { loss, ratio, kl, penalty })
}

#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: NodeId,
    pub sto: Option<StoTerms>,
    pub det: Option<NodeId>,
}

/// Loss for the configured mode; both passes share one tape so gradients sum.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    tape: &mut Tape,
    net: &PolicyNet,
    store: &ParamStore,
    turns: &[&EncodedTurn],
    mode: LossMode,
    returns: &[f64],
    view: Option<&BehaviorView>,
    beta: f64,
    eta: f64,
) -> Result<LossParts, PolicyError> {
    match mode {
        LossMode::CeBaseline => Ok(LossParts { total: ce_loss(tape, net, store, turns)?, sto: None, det: None }),
        LossMode::DetOnly => {
            let det = loss_det(tape, net, store, turns, returns)?;
            Ok(LossParts { total: det, sto: None, det: Some(det) })
        }
        LossMode::CaspiFull => {
            let view = view.ok_or_else(|| PolicyError::Config("caspi_full needs a behavior table".into()))?;
            let sto = loss_sto(tape, net, store, turns, view, returns, beta, eta)?;
            let det = loss_det(tape, net, store, turns, returns)?;
            let total = tape.add(sto.loss, det)?;
            Ok(LossParts { total, sto: Some(sto), det: Some(det) })
        }
    }
}

/// Sets the head so that, for any input, the renormalized policy over the
/// table's inventory equals `target`: head weights are zeroed and the bias is
/// fitted by maximizing `sum_a target(a) log pi_e(a)`. Returns the largest
/// remaining probability gap.
pub fn fit_head_to_distribution(
    net: &PolicyNet,
    store: &mut ParamStore,
    table: &BehaviorTable,
    target: &[f64],
) -> Result<f64, PolicyError> {
    let mut rows: Vec<Vec<usize>> = Vec::with_capacity(table.len());
    for act in &table.acts {
        let mut ks = Vec::new();
        for tok in act {
            ks.push(net.act_position(tok).ok_or_else(|| PolicyError::UnknownAct(tok.to_string()))?);
        }
        rows.push(ks);
    }
    let v = net.acts.len();
    let mut bias = vec![0.0; v];
    let softmax = |bias: &[f64]| -> Vec<f64> {
        let s: Vec<f64> = rows.iter().map(|ks| ks.iter().map(|&k| bias[k]).sum()).collect();
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|x| x / z).collect()
    };
    let mut gap = f64::INFINITY;
    for _ in 0..200_000 {
        let q = softmax(&bias);
        gap = q.iter().zip(target).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if gap < 1e-15 {
            break;
        }
        for (ks, (p, qa)) in rows.iter().zip(target.iter().zip(&q)) {
            for &k in ks {
                bias[k] += 0.5 * (p - qa);
            }
        }
    }
    let w = store.get_mut(&net.head.weight).ok_or_else(|| PolicyError::Config("head weight missing".into()))?;
    w.data.iter_mut().for_each(|x| *x = 0.0);
    let b = store.get_mut(&net.head.bias).ok_or_else(|| PolicyError::Config("head bias missing".into()))?;
    b.data.copy_from_slice(&bias);
    Ok(gap)
}
