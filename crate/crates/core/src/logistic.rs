//! L2-regularized logistic regression solved with L-BFGS.
//!
//! Small and dense: the feature count is the flattened latent bundle, a few
//! thousand at most.

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
}

impl LogisticModel {
    pub fn decision(&self, x: &[f64]) -> f64 {
        dot(&self.weights, x) + self.bias
    }

    pub fn predict(&self, x: &[f64]) -> bool {
        self.decision(x) > 0.0
    }

    pub fn accuracy(&self, rows: &[Vec<f64>], labels: &[bool]) -> f64 {
        if rows.is_empty() {
            return f64::NAN;
        }
        let correct = rows
            .iter()
            .zip(labels)
            .filter(|(x, &y)| self.predict(x) == y)
            .count();
        correct as f64 / rows.len() as f64
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log1p_exp(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Objective: mean logistic loss + `l2 / 2 * |w|^2`. Parameters are packed as
/// `[w..., b]`; the bias is not penalized.
fn objective(params: &[f64], rows: &[Vec<f64>], signs: &[f64], l2: f64, grad: &mut [f64]) -> f64 {
    let dim = params.len() - 1;
    let (w, b) = (&params[..dim], params[dim]);
    grad.iter_mut().for_each(|g| *g = 0.0);
    let n = rows.len() as f64;
    let mut loss = 0.0;
    for (x, &y) in rows.iter().zip(signs) {
        let margin = y * (dot(w, x) + b);
        loss += log1p_exp(-margin);
        let coeff = -y * sigmoid(-margin) / n;
        for (g, xi) in grad[..dim].iter_mut().zip(x) {
            *g += coeff * xi;
        }
        grad[dim] += coeff;
    }
    loss /= n;
    let mut penalty = 0.0;
    for (g, wi) in grad[..dim].iter_mut().zip(w) {
        *g += l2 * wi;
        penalty += wi * wi;
    }
    loss + 0.5 * l2 * penalty
}

/// Fits the classifier. Deterministic for a given row order.
pub fn fit(rows: &[Vec<f64>], labels: &[bool], l2: f64, max_iter: usize) -> LogisticModel {
    let dim = rows.first().map_or(0, |r| r.len());
    let signs: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { -1.0 }).collect();
    let n_params = dim + 1;
    let history = 10;

    let mut x = vec![0.0; n_params];
    let mut g = vec![0.0; n_params];
    let mut f = objective(&x, rows, &signs, l2, &mut g);
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut iterations = 0;

    for iter in 0..max_iter {
        iterations = iter + 1;
        let gnorm = dot(&g, &g).sqrt();
        if gnorm < 1e-10 {
            break;
        }
        // Two-loop recursion.
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(s_hist.len());
        for (s, y) in s_hist.iter().zip(&y_hist).rev() {
            let rho = 1.0 / dot(y, s);
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push((a, rho));
        }
        if let (Some(s), Some(y)) = (s_hist.last(), y_hist.last()) {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|qi| *qi *= gamma);
        } else {
            q.iter_mut().for_each(|qi| *qi /= gnorm.max(1.0));
        }
        for ((s, y), (a, rho)) in s_hist.iter().zip(&y_hist).zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let direction: Vec<f64> = q.iter().map(|v| -v).collect();
        let slope = dot(&g, &direction);
        if slope >= 0.0 {
            // Not a descent direction; restart from steepest descent.
            s_hist.clear();
            y_hist.clear();
            continue;
        }

        let mut step = 1.0;
        let mut g_new = vec![0.0; n_params];
        let mut x_new;
        let mut f_new;
        loop {
            x_new = x.iter().zip(&direction).map(|(xi, di)| xi + step * di).collect::<Vec<_>>();
            f_new = objective(&x_new, rows, &signs, l2, &mut g_new);
            if f_new <= f + 1e-4 * step * slope || step < 1e-12 {
                break;
            }
            step *= 0.5;
        }
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let converged = (f - f_new).abs() <= 1e-12 * f.abs().max(1.0);
        if dot(&s, &y) > 1e-12 {
            s_hist.push(s);
            y_hist.push(y);
            if s_hist.len() > history {
                s_hist.remove(0);
                y_hist.remove(0);
            }
        }
        x = x_new;
        g = g_new;
        f = f_new;
        if converged {
            break;
        }
    }

    LogisticModel {
        bias: x[dim],
        weights: x[..dim].to_vec(),
        iterations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn antipodal_pair_gives_parallel_normal() {
        let w = vec![0.3, -1.2, 2.0];
        let neg: Vec<f64> = w.iter().map(|v| -v).collect();
        let model = fit(&[w.clone(), neg], &[true, false], 1e-3, 500);
        let norm = dot(&model.weights, &model.weights).sqrt();
        let wn = dot(&w, &w).sqrt();
        let cos = dot(&model.weights, &w) / (norm * wn);
        assert!(cos > 1.0 - 1e-9, "cos {cos}");
        assert!(model.bias.abs() < 1e-6);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let rows = vec![vec![1.0, 2.0], vec![-0.5, 0.3], vec![0.2, -1.0]];
        let labels = [true, false, true];
        let signs: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { -1.0 }).collect();
        let p = vec![0.4, -0.7, 0.1];
        let mut g = vec![0.0; 3];
        objective(&p, &rows, &signs, 0.1, &mut g);
        let h = 1e-6;
        for i in 0..3 {
            let mut plus = p.clone();
            let mut minus = p.clone();
            plus[i] += h;
            minus[i] -= h;
            let mut tmp = vec![0.0; 3];
            let fd = (objective(&plus, &rows, &signs, 0.1, &mut tmp)
                - objective(&minus, &rows, &signs, 0.1, &mut tmp))
                / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-7, "{i}: {fd} vs {}", g[i]);
        }
    }
}
