use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ShapeError, Var};
use crate::kb::EntityId;

use super::Aspect;

/// One aspect's contribution to a candidate score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AspectScore {
    pub aspect: Aspect,
    /// Attention over question positions.
    pub alpha: Vec<f64>,
    /// Aspect-conditioned question vector.
    pub r: Vec<f64>,
    /// `s = h_x · r`
    pub similarity: f64,
    /// `w = mean(H) · r`, after normalisation when enabled.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub aspects: Vec<AspectScore>,
    pub score: f64,
}

/// `tanh(H Wᵀ + b)`, shape `[n, d]`.
pub fn project_question(g: &mut Graph, hidden: Var, w: Var, b: Var) -> Result<Var, ShapeError> {
    let z = g.matmul_nt(hidden, w)?;
    let z = g.add_row_bias(z, b)?;
    Ok(g.tanh(z))
}

/// Attention of aspect vector `h_x` over the projected question.
/// Returns `(alpha, r)` with `r = Σ_j alpha_j H_j`.
pub fn attend(g: &mut Graph, projected: Var, hidden: Var, h_x: Var) -> Result<(Var, Var), ShapeError> {
    let u = g.matmul(projected, h_x)?;
    let alpha = g.softmax(u)?;
    let r = g.matmul(alpha, hidden)?;
    Ok((alpha, r))
}

/// Projection and attention in one call.
pub fn aspect_attention(g: &mut Graph, hidden: Var, h_x: Var, w: Var, b: Var) -> Result<(Var, Var), ShapeError> {
    let p = project_question(g, hidden, w, b)?;
    attend(g, p, hidden, h_x)
}

/// `S = Σ_x w_x s_x` over `(aspect, h_x, alpha, r)` parts. No parts gives 0.
pub fn combine_aspects(
    g: &mut Graph,
    mean: Var,
    parts: &[(Aspect, Var, Var, Var)],
    normalize: bool,
) -> Result<(Var, Vec<AspectScore>), ShapeError> {
    if parts.is_empty() {
        return Ok((g.scalar_const(0.0), Vec::new()));
    }
    let mut sims = Vec::with_capacity(parts.len());
    let mut weights = Vec::with_capacity(parts.len());
    for &(_, h_x, _, r) in parts {
        sims.push(g.dot(h_x, r)?);
        weights.push(g.dot(mean, r)?);
    }
    let s = g.concat(&sims)?;
    let mut w = g.concat(&weights)?;
    if normalize {
        w = g.softmax(w)?;
    }
    let score = g.dot(w, s)?;
    let (sv, wv) = (g.value(s).to_vec(), g.value(w).to_vec());
    let pieces = parts
        .iter()
        .enumerate()
        .map(|(i, &(aspect, _, alpha, r))| AspectScore {
            aspect,
            alpha: g.value(alpha).to_vec(),
            r: g.value(r).to_vec(),
            similarity: sv[i],
            weight: wv[i],
        })
        .collect();
    Ok((score, pieces))
}

/// `max(0, γ − S_pos + S_neg)`
pub fn hinge_loss(s_pos: f64, s_neg: f64, gamma: f64) -> f64 {
    (gamma - s_pos + s_neg).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Prediction {
    pub entities: BTreeSet<EntityId>,
    /// Entity of the top-scoring entry; ties go to the lowest id.
    pub best: Option<EntityId>,
    /// Set when there were no candidates to score.
    pub empty_warning: bool,
}

/// Every entity with an entry scoring strictly above `best − γ`.
pub fn predict(scores: &[(EntityId, f64)], gamma: f64) -> Prediction {
    let Some(&(mut best, mut top)) = scores.first() else {
        return Prediction {
            empty_warning: true,
            ..Default::default()
        };
    };
    for &(e, s) in &scores[1..] {
        if s > top || (s == top && e < best) {
            best = e;
            top = s;
        }
    }
    let mut entities: BTreeSet<EntityId> = scores
        .iter()
        .filter(|&&(_, s)| s > top - gamma)
        .map(|&(e, _)| e)
        .collect();
    entities.insert(best);
    Prediction {
        entities,
        best: Some(best),
        empty_warning: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{ParamStore, Tensor};

    #[test]
    fn hinge_examples() {
        assert_eq!(hinge_loss(1.0, 0.2, 0.5), 0.0);
        assert!((hinge_loss(0.3, 0.2, 0.5) - 0.4).abs() < 1e-12);
        assert_eq!(hinge_loss(0.7, 0.7, 0.5), 0.5);
    }

    #[test]
    fn threshold_is_strict() {
        let p = predict(&[(0, 0.9), (1, 0.5), (2, 0.45)], 0.1);
        assert_eq!(p.entities, [0].into_iter().collect());
        let p = predict(&[(3, 1.0), (1, 0.95), (2, 0.0)], 2.0);
        assert_eq!(p.entities.len(), 3);
        let p = predict(&[(4, 0.5), (2, 0.5)], 1e-9);
        assert_eq!(p.best, Some(2));
        assert_eq!(p.entities, [2, 4].into_iter().collect());
        let p = predict(&[], 0.2);
        assert!(p.empty_warning && p.entities.is_empty());
    }

    #[test]
    fn single_position_attention() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let h = g.constant(vec![1, 2], vec![0.3, -0.7]);
        let x = g.constant(vec![2], vec![1.0, 2.0]);
        let w = g.constant(vec![2, 2], vec![1.0, 0.5, -0.2, 0.1]);
        let b = g.constant(vec![2], vec![0.0, 0.1]);
        let (alpha, r) = aspect_attention(&mut g, h, x, w, b).unwrap();
        assert_eq!(g.value(alpha), &[1.0]);
        assert_eq!(g.value(r), &[0.3, -0.7]);
    }

    #[test]
    fn two_token_golden_score() {
        // H = I, W = I, b = 0, h_t = [1, 0], type aspect only.
        // u = [tanh 1, 0], alpha_1 = σ(tanh 1), r = alpha, s = alpha_1,
        // w = mean(H)·r = 0.5, S = alpha_1 / 2.
        let mut store = ParamStore::new();
        let wid = store.insert("w", Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let bid = store.insert("b", Tensor::zeros(vec![2]));
        let mut g = Graph::new(&store);
        let h = g.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let mean = g.mean_axis(h, 0).unwrap();
        let ht = g.constant(vec![2], vec![1.0, 0.0]);
        let (w, b) = (g.param(wid), g.param(bid));
        let (alpha, r) = aspect_attention(&mut g, h, ht, w, b).unwrap();
        let (s, parts) = combine_aspects(&mut g, mean, &[(Aspect::Type, ht, alpha, r)], false).unwrap();
        assert!((g.value(alpha)[0] - 0.6816997421945262).abs() < 1e-15);
        assert!((parts[0].weight - 0.5).abs() < 1e-15);
        assert!((g.scalar(s) - 0.3408498710972631).abs() < 1e-15);
    }

    #[test]
    fn zero_hidden_gives_zero_score() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let h = g.zeros(vec![3, 2]);
        let mean = g.mean_axis(h, 0).unwrap();
        let x = g.constant(vec![2], vec![0.4, -1.0]);
        let w = g.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = g.constant(vec![2], vec![0.5, 0.5]);
        let (alpha, r) = aspect_attention(&mut g, h, x, w, b).unwrap();
        let (s, _) = combine_aspects(&mut g, mean, &[(Aspect::Entity, x, alpha, r)], false).unwrap();
        assert_eq!(g.scalar(s), 0.0);
    }
}
