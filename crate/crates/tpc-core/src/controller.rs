//! Per-token propagation control: break probabilities, the token
//! distribution regularizer, cumulative halting with remainder tracking,
//! and the aggregated per-layer output weights.
//!
//! Everything here is plain f64 bookkeeping. The differentiable mirror of
//! these quantities is built on the tape by the model forward pass, which
//! consults this state machine for halting decisions (straight-through).

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("probability out of range: {name} = {value}")]
    OutOfRange { name: &'static str, value: f64 },
    #[error("empty active token set")]
    EmptyActiveSet,
    #[error("layer {layer} outside 1..={depth}")]
    BadLayer { layer: usize, depth: usize },
}

/// How cumulative halting is tracked across layers.
///
/// `CumulativeSum` follows the additive update of the propagation
/// algorithm and is the only mode under which the per-token output weights
/// sum to one. `CumulativeProduct` keeps the multiplicative reading of the
/// halting rule for fidelity experiments. `PauseRestart` is an experimental
/// mode where per-layer participation is additionally gated by thresholding
/// the pause and restart probabilities at 0.5, allowing a paused token to
/// rejoin later layers; cumulative halting still uses the additive rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum HaltMode {
    #[default]
    CumulativeSum,
    CumulativeProduct,
    PauseRestart,
}

/// One token's gate readings at one layer, plus the aggregated weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BreakRecord {
    pub token: usize,
    pub layer: usize,
    pub pause: f64,
    pub restart: f64,
    pub non_restart: f64,
    pub b_raw: f64,
    pub b_reg: f64,
    pub weight: f64,
}

/// Per-token halting bookkeeping across the layer loop.
#[derive(Debug, Clone)]
pub struct TokenHaltState {
    /// Accumulated (regularized) break mass; sum mode starts at 0,
    /// product mode starts at 1.
    pub cumulation: Vec<f64>,
    /// `1 - sum of pre-halt break mass`, filled when a token halts.
    pub remainder: Vec<f64>,
    /// Active mask entering the next layer. The CLS index never drops.
    pub mask: Vec<bool>,
    /// 1-based halting layer, `None` until the token halts.
    pub halting_layer: Vec<Option<usize>>,
    /// Layers the token was active for (the per-token ponder count).
    pub eta: Vec<usize>,
    halted: Vec<bool>,
    mode: HaltMode,
    cls_index: Option<usize>,
}

impl TokenHaltState {
    pub fn new(tokens: usize, mode: HaltMode, cls_index: Option<usize>) -> Self {
        let init_cum = match mode {
            HaltMode::CumulativeProduct => 1.0,
            _ => 0.0,
        };
        TokenHaltState {
            cumulation: vec![init_cum; tokens],
            remainder: vec![0.0; tokens],
            mask: vec![true; tokens],
            halting_layer: vec![None; tokens],
            eta: vec![0; tokens],
            halted: vec![false; tokens],
            mode,
            cls_index,
        }
    }

    pub fn tokens(&self) -> usize {
        self.mask.len()
    }

    pub fn halted(&self, token: usize) -> bool {
        self.halted[token]
    }

    pub fn mode(&self) -> HaltMode {
        self.mode
    }

    /// Mean 1-based halting layer over all tokens; unhalted tokens count as
    /// the current depth bound `depth`.
    pub fn mean_halting_layer(&self, depth: usize) -> f64 {
        let total: usize = self
            .halting_layer
            .iter()
            .map(|m| m.unwrap_or(depth))
            .sum();
        total as f64 / self.tokens() as f64
    }
}

/// Break probability `b = p * (1 - r)` of a pause/restart pair.
pub fn break_prob(pause: f64, restart: f64) -> Result<f64, ControllerError> {
    if !(0.0..=1.0).contains(&pause) {
        return Err(ControllerError::OutOfRange { name: "pause", value: pause });
    }
    if !(0.0..=1.0).contains(&restart) {
        return Err(ControllerError::OutOfRange { name: "restart", value: restart });
    }
    Ok(pause * (1.0 - restart))
}

/// Token distribution regularizer: convex mix of each active token's break
/// probability with the mean over the active set. Inactive entries pass
/// through untouched.
pub fn regularize(b: &[f64], active: &[bool], zeta: f64) -> Result<Vec<f64>, ControllerError> {
    assert_eq!(b.len(), active.len());
    if !(0.0..=1.0).contains(&zeta) {
        return Err(ControllerError::OutOfRange { name: "zeta", value: zeta });
    }
    let count = active.iter().filter(|a| **a).count();
    if count == 0 {
        return Err(ControllerError::EmptyActiveSet);
    }
    for (&bk, &a) in b.iter().zip(active) {
        if a && !(0.0..=1.0).contains(&bk) {
            return Err(ControllerError::OutOfRange { name: "b", value: bk });
        }
    }
    let mean = b
        .iter()
        .zip(active)
        .filter(|(_, a)| **a)
        .map(|(v, _)| v)
        .sum::<f64>()
        / count as f64;
    Ok(b.iter()
        .zip(active)
        .map(|(&bk, &a)| if a { zeta * bk + (1.0 - zeta) * mean } else { bk })
        .collect())
}

/// Advance the halting state by one layer and return the per-token
/// aggregated output weight for this layer.
///
/// At `layer == depth` the break probability of every still-active token is
/// forced to 1 so the weights close to a sum of one. Tokens that already
/// halted get weight 0 and accumulate nothing.
pub fn step(
    state: &mut TokenHaltState,
    b_reg: &[f64],
    layer: usize,
    delta: f64,
    depth: usize,
) -> Result<Vec<f64>, ControllerError> {
    assert_eq!(b_reg.len(), state.tokens());
    if layer == 0 || layer > depth {
        return Err(ControllerError::BadLayer { layer, depth });
    }
    let threshold = 1.0 - delta;
    let mut weights = vec![0.0; state.tokens()];
    for k in 0..state.tokens() {
        if state.halted[k] {
            continue;
        }
        let b = if layer == depth { 1.0 } else { b_reg[k] };
        state.eta[k] += 1;
        let cum_before = state.cumulation[k];
        let (cum_after, crossed) = match state.mode {
            HaltMode::CumulativeProduct => {
                let c = cum_before * b;
                // Strict comparison: a product of probabilities starts at 1
                // and only decreases, so the multiplicative reading can only
                // terminate through the forced final layer.
                (c, c > threshold && layer < depth || layer == depth)
            }
            _ => {
                let c = cum_before + b;
                (c, c >= threshold)
            }
        };
        state.cumulation[k] = cum_after;
        if crossed {
            state.halted[k] = true;
            state.halting_layer[k] = Some(layer);
            let remainder = 1.0 - cum_before;
            state.remainder[k] = remainder;
            weights[k] = remainder;
            if state.cls_index != Some(k) {
                state.mask[k] = false;
            }
        } else {
            weights[k] = b;
        }
    }
    Ok(weights)
}

/// One-shot scan of a full break-probability sequence: 1-based halting
/// layer under the additive rule (or multiplicative for
/// `CumulativeProduct`), with the final layer forced.
pub fn halting_layer(b_seq: &[f64], delta: f64, mode: HaltMode) -> usize {
    let depth = b_seq.len();
    let threshold = 1.0 - delta;
    match mode {
        HaltMode::CumulativeProduct => {
            let mut prod = 1.0;
            for (i, &b) in b_seq.iter().enumerate() {
                let l = i + 1;
                if l == depth {
                    return depth;
                }
                prod *= b;
                if prod > threshold {
                    return l;
                }
            }
            depth
        }
        _ => {
            let mut cum = 0.0;
            for (i, &b) in b_seq.iter().enumerate() {
                let l = i + 1;
                let b = if l == depth { 1.0 } else { b };
                cum += b;
                if cum >= threshold {
                    return l;
                }
            }
            depth
        }
    }
}

/// Weighted average of per-layer CLS states: `t_out = sum_l w_l * t_cls^l`.
pub fn aggregate_cls(cls_states: &[Vec<f64>], weights: &[f64]) -> Vec<f64> {
    assert_eq!(cls_states.len(), weights.len());
    assert!(!cls_states.is_empty());
    debug_assert!(
        (weights.iter().sum::<f64>() - 1.0).abs() < 1e-6,
        "aggregation weights must sum to 1"
    );
    let d = cls_states[0].len();
    let mut out = vec![0.0; d];
    for (state, &w) in cls_states.iter().zip(weights) {
        for (o, &v) in out.iter_mut().zip(state) {
            *o += w * v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn break_prob_arithmetic() {
        assert_eq!(break_prob(0.5, 0.5).unwrap(), 0.25);
        assert_eq!(break_prob(0.7, 1.0).unwrap(), 0.0);
        assert_eq!(break_prob(1.0, 0.0).unwrap(), 1.0);
        assert!(break_prob(1.2, 0.0).is_err());
        assert!(break_prob(0.5, -0.1).is_err());
    }

    #[test]
    fn regularize_endpoints_and_hand_case() {
        let active = vec![true, true];
        let b = vec![0.2, 0.4];
        assert_eq!(regularize(&b, &active, 1.0).unwrap(), b);
        let all_mean = regularize(&b, &active, 0.0).unwrap();
        assert!((all_mean[0] - 0.3).abs() < 1e-15 && (all_mean[1] - 0.3).abs() < 1e-15);
        let half = regularize(&b, &active, 0.5).unwrap();
        assert!((half[0] - 0.25).abs() < 1e-15 && (half[1] - 0.35).abs() < 1e-15);
    }

    #[test]
    fn regularize_preserves_mean_and_range() {
        let active = vec![true, true, true, false];
        let b = vec![0.9, 0.1, 0.5, 0.7];
        let out = regularize(&b, &active, 0.3).unwrap();
        let mean_in = (0.9 + 0.1 + 0.5) / 3.0;
        let mean_out = (out[0] + out[1] + out[2]) / 3.0;
        assert!((mean_in - mean_out).abs() < 1e-12);
        assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(out[3], 0.7); // inactive untouched
    }

    #[test]
    fn regularize_rejects_empty_active_set() {
        assert!(matches!(
            regularize(&[0.5], &[false], 0.5),
            Err(ControllerError::EmptyActiveSet)
        ));
    }

    #[test]
    fn step_crosses_at_layer_four() {
        // delta=0.01, b=0.3 per layer: cumsum 0.3 0.6 0.9 1.2 crosses 0.99 at 4
        let mut state = TokenHaltState::new(1, HaltMode::CumulativeSum, None);
        for l in 1..=3 {
            let w = step(&mut state, &[0.3], l, 0.01, 12).unwrap();
            assert_eq!(w[0], 0.3);
            assert!(!state.halted(0));
        }
        let w = step(&mut state, &[0.3], 4, 0.01, 12).unwrap();
        assert_eq!(state.halting_layer[0], Some(4));
        assert!((state.remainder[0] - 0.1).abs() < 1e-12);
        assert!((w[0] - 0.1).abs() < 1e-12);
        assert!(!state.mask[0]);
    }

    #[test]
    fn zero_breaks_force_halt_at_final_layer() {
        let depth = 5;
        let mut state = TokenHaltState::new(1, HaltMode::CumulativeSum, None);
        let mut total = 0.0;
        for l in 1..=depth {
            let w = step(&mut state, &[0.0], l, 0.01, depth).unwrap();
            total += w[0];
        }
        assert_eq!(state.halting_layer[0], Some(depth));
        assert_eq!(state.remainder[0], 1.0);
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cls_index_keeps_mask_alive() {
        let mut state = TokenHaltState::new(2, HaltMode::CumulativeSum, Some(0));
        step(&mut state, &[1.0, 1.0], 1, 0.01, 4).unwrap();
        assert!(state.halted(0) && state.halted(1));
        assert!(state.mask[0]);
        assert!(!state.mask[1]);
    }

    #[test]
    fn halting_layer_examples() {
        assert_eq!(halting_layer(&[1.0, 0.1, 0.1], 0.01, HaltMode::CumulativeSum), 1);
        assert_eq!(
            halting_layer(&[0.3, 0.3, 0.3, 0.3], 0.01, HaltMode::CumulativeSum),
            4
        );
        // product rule: 0.5*0.5 = 0.25 never exceeds 0.5, so only the forced
        // final layer halts
        assert_eq!(
            halting_layer(&[0.5, 0.5], 0.5, HaltMode::CumulativeProduct),
            2
        );
    }

    #[test]
    fn aggregate_cls_degenerate_weights() {
        let states = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        assert_eq!(aggregate_cls(&states, &[0.0, 1.0]), vec![3.0, 4.0]);
        assert_eq!(aggregate_cls(&states, &[0.5, 0.5]), vec![2.0, 3.0]);
    }

    #[test]
    fn aggregate_cls_stays_in_convex_hull() {
        use rand::Rng;
        let mut r = rand::rngs::mock::StepRng::new(42, 0x9E3779B97F4A7C15);
        for _ in 0..50 {
            let states: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..3).map(|_| r.gen_range(-5.0..5.0)).collect())
                .collect();
            let mut w: Vec<f64> = (0..4).map(|_| r.gen_range(0.0..1.0)).collect();
            let sum: f64 = w.iter().sum();
            for v in &mut w {
                *v /= sum;
            }
            let out = aggregate_cls(&states, &w);
            for dim in 0..3 {
                let lo = states.iter().map(|s| s[dim]).fold(f64::INFINITY, f64::min);
                let hi = states
                    .iter()
                    .map(|s| s[dim])
                    .fold(f64::NEG_INFINITY, f64::max);
                assert!(out[dim] >= lo - 1e-12 && out[dim] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn ordering_invariance_under_token_permutation() {
        let b = vec![0.4, 0.9, 0.05, 0.6];
        let perm = [2usize, 0, 3, 1];
        let mut a = TokenHaltState::new(4, HaltMode::CumulativeSum, None);
        let mut p = TokenHaltState::new(4, HaltMode::CumulativeSum, None);
        let bp: Vec<f64> = perm.iter().map(|&i| b[i]).collect();
        for l in 1..=3 {
            let wa = step(&mut a, &b, l, 0.1, 3).unwrap();
            let wp = step(&mut p, &bp, l, 0.1, 3).unwrap();
            for (j, &i) in perm.iter().enumerate() {
                assert_eq!(wa[i], wp[j]);
            }
        }
        for (j, &i) in perm.iter().enumerate() {
            assert_eq!(a.halting_layer[i], p.halting_layer[j]);
            assert_eq!(a.remainder[i], p.remainder[j]);
        }
    }
}
