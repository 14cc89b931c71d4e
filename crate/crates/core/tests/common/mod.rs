//! Independent oracles shared by the integration tests. Nothing here calls
//! the crate's fitting code.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use tndipw::simulator::ScenarioSpec;

fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Weighted Bernoulli negative log-likelihood, rows given row-major.
pub fn neg_log_lik(rows: &[Vec<f64>], y: &[f64], w: &[f64], b: &[f64]) -> f64 {
    rows.iter()
        .zip(y)
        .zip(w)
        .map(|((d, &yi), &wi)| {
            let eta: f64 = d.iter().zip(b).map(|(a, c)| a * c).sum();
            // log(1 + e^eta) − y eta, stable on both sides
            let softplus = if eta > 0.0 { eta + (-eta).exp().ln_1p() } else { eta.exp().ln_1p() };
            wi * (softplus - yi * eta)
        })
        .sum()
}

/// Plain Nelder–Mead with the usual coefficients (1, 2, 0.5, 0.5).
/// Stops when the simplex's function spread falls below `ftol`.
pub fn nelder_mead<F: Fn(&[f64]) -> f64>(f: &F, start: &[f64], step: f64, ftol: f64, max_evals: usize) -> (Vec<f64>, f64) {
    let n = start.len();
    let mut simplex: Vec<Vec<f64>> = vec![start.to_vec()];
    for i in 0..n {
        let mut p = start.to_vec();
        p[i] += step;
        simplex.push(p);
    }
    let mut values: Vec<f64> = simplex.iter().map(|p| f(p)).collect();
    let mut evals = n + 1;
    while evals < max_evals {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();
        if (values[n] - values[0]).abs() <= ftol * (1.0 + values[0].abs()) {
            break;
        }
        let centroid: Vec<f64> = (0..n).map(|j| simplex[..n].iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
        let along = |t: f64| -> Vec<f64> { (0..n).map(|j| centroid[j] + t * (simplex[n][j] - centroid[j])).collect() };
        let reflected = along(-1.0);
        let fr = f(&reflected);
        evals += 1;
        if fr < values[0] {
            let expanded = along(-2.0);
            let fe = f(&expanded);
            evals += 1;
            if fe < fr {
                simplex[n] = expanded;
                values[n] = fe;
            } else {
                simplex[n] = reflected;
                values[n] = fr;
            }
        } else if fr < values[n - 1] {
            simplex[n] = reflected;
            values[n] = fr;
        } else {
            let (contracted, fc) = if fr < values[n] {
                let p = along(-0.5);
                let v = f(&p);
                (p, v)
            } else {
                let p = along(0.5);
                let v = f(&p);
                (p, v)
            };
            evals += 1;
            if fc < values[n].min(fr) {
                simplex[n] = contracted;
                values[n] = fc;
            } else {
                for i in 1..=n {
                    simplex[i] = (0..n).map(|j| simplex[0][j] + 0.5 * (simplex[i][j] - simplex[0][j])).collect();
                    values[i] = f(&simplex[i]);
                }
                evals += n;
            }
        }
    }
    let best = (0..=n).min_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap();
    (simplex[best].clone(), values[best])
}

/// Brute-force maximum likelihood: Nelder–Mead restarted from its own
/// optimum with a shrinking simplex until the point stops moving.
pub fn brute_force_mle(rows: &[Vec<f64>], y: &[f64], w: &[f64]) -> Vec<f64> {
    let p = rows[0].len();
    let f = |b: &[f64]| neg_log_lik(rows, y, w, b);
    let mut best = vec![0.0; p];
    let mut step = 1.0;
    for _ in 0..40 {
        let (next, _) = nelder_mead(&f, &best, step, 1e-15, 20_000);
        let moved = next.iter().zip(&best).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        best = next;
        if moved < 1e-9 && step < 1e-4 {
            break;
        }
        step = (moved * 2.0).clamp(1e-6, 1.0);
    }
    best
}

/// log OR and its closed-form SE for a 2x2 table
/// [[a, b], [c, d]] = exposed cases, exposed non-cases, unexposed cases,
/// unexposed non-cases.
pub fn two_by_two(a: f64, b: f64, c: f64, d: f64) -> (f64, f64) {
    ((a * d / (b * c)).ln(), (1.0 / a + 1.0 / b + 1.0 / c + 1.0 / d).sqrt())
}

/// Newton solve of Σ m d (q − expit(dᵀb)) = 0 on (1, x, c) cells. Small
/// and dense, so a direct 3x3 solve per step.
pub fn solve_cells(cells: &[(f64, f64, f64, f64)]) -> [f64; 3] {
    // (x, c, target probability, mass)
    let mut b = DVector::<f64>::zeros(3);
    for _ in 0..200 {
        let mut score = DVector::<f64>::zeros(3);
        let mut info = DMatrix::<f64>::zeros(3, 3);
        for &(x, c, q, m) in cells {
            let d = DVector::from_vec(vec![1.0, x, c]);
            let p = expit(d.dot(&b));
            score += &d * (m * (q - p));
            info += &d * d.transpose() * (m * p * (1.0 - p));
        }
        let step = info.lu().solve(&score).expect("nonsingular cell information");
        b += &step;
        if step.amax() < 1e-14 {
            break;
        }
    }
    [b[0], b[1], b[2]]
}

/// (x, c, w, h) cell key with [total, tested, tested-and-infected] mass.
pub type CellMasses = ((u8, u8, u8, u8), [f64; 3]);

/// Mass over (x, c, w, h) written out from the structural equations, with
/// [total, tested, tested-and-infected].
pub fn xcwh_masses(spec: &ScenarioSpec) -> Vec<CellMasses> {
    let k = &spec.coef_y1;
    let o = &spec.coef_y_other;
    let t = &spec.coef_t;
    let sw = &spec.coef_w;
    let ph = spec.p_h.unwrap_or(0.0);
    let mut out: Vec<CellMasses> = Vec::new();
    for x in 0..2u8 {
        for c in 0..2u8 {
            for w in 0..2u8 {
                for h in 0..2u8 {
                    let pc = if c == 1 { spec.p_c } else { 1.0 - spec.p_c };
                    let px1 = spec.p_x_given_c[c as usize];
                    let px = if x == 1 { px1 } else { 1.0 - px1 };
                    let phh = if h == 1 { ph } else { 1.0 - ph };
                    let (xf, cf, hf, wf) = (x as f64, c as f64, h as f64, w as f64);
                    let mut acc = [0.0; 3];
                    for u in 0..2u8 {
                        let pu = if u == 1 { spec.p_u } else { 1.0 - spec.p_u };
                        let uf = u as f64;
                        let p1 = expit(k.intercept + k.x * xf + k.c * cf + k.u * uf + k.h * hf);
                        let po = expit(o.intercept + o.x * xf + o.c * cf + o.u * uf);
                        for y1 in 0..2u8 {
                            for yo in 0..2u8 {
                                let py = (if y1 == 1 { p1 } else { 1.0 - p1 }) * (if yo == 1 { po } else { 1.0 - po });
                                let pw1 = if y1 == 0 && yo == 0 {
                                    sw.baseline
                                } else {
                                    let a = if y1 == 1 { 1.0 - sw.given_y1 } else { 1.0 };
                                    let b = if yo == 1 { 1.0 - sw.given_other } else { 1.0 };
                                    1.0 - a * b
                                };
                                let pw = if w == 1 { pw1 } else { 1.0 - pw1 };
                                let pt = expit(t.intercept + t.w * wf + t.x * xf + t.c * cf + t.wx * wf * xf + t.h * hf + t.hx * hf * xf);
                                let m = pc * px * phh * pu * py * pw;
                                acc[0] += m;
                                acc[1] += m * pt;
                                if y1 == 1 {
                                    acc[2] += m * pt;
                                }
                            }
                        }
                    }
                    if spec.p_h.is_none() && h == 1 {
                        continue;
                    }
                    out.push(((x, c, w, h), acc));
                }
            }
        }
    }
    out
}

/// IPW score solved on exact masses: Q and Pr(T = 1) per (x, c, w[, h])
/// cell, each cell weighted by tested mass / Pr(T = 1).
pub fn exact_ipw_oracle(spec: &ScenarioSpec, adjust_h: bool) -> [f64; 3] {
    let mut pooled: std::collections::BTreeMap<(u8, u8, u8, u8), [f64; 3]> = Default::default();
    for ((x, c, w, h), m) in xcwh_masses(spec) {
        let key = (x, c, w, if adjust_h { h } else { 0 });
        let e = pooled.entry(key).or_default();
        for i in 0..3 {
            e[i] += m[i];
        }
    }
    let cells: Vec<(f64, f64, f64, f64)> = pooled
        .iter()
        .filter(|(_, m)| m[1] > 0.0)
        .map(|(&(x, c, _, _), m)| {
            let q = m[2] / m[1];
            let p = m[1] / m[0];
            (x as f64, c as f64, q, m[1] / p)
        })
        .collect();
    solve_cells(&cells)
}

/// Population (X, C) logistic coefficients of Y¹ with H and U summed out.
pub fn marginal_truth(spec: &ScenarioSpec) -> [f64; 3] {
    let k = &spec.coef_y1;
    let ph = spec.p_h.unwrap_or(0.0);
    let mut cells = Vec::new();
    for x in 0..2u8 {
        for c in 0..2u8 {
            let pc = if c == 1 { spec.p_c } else { 1.0 - spec.p_c };
            let px1 = spec.p_x_given_c[c as usize];
            let px = if x == 1 { px1 } else { 1.0 - px1 };
            let mut q = 0.0;
            for (h, wh) in [(0.0, 1.0 - ph), (1.0, ph)] {
                for (u, wu) in [(0.0, 1.0 - spec.p_u), (1.0, spec.p_u)] {
                    q += wh * wu * expit(k.intercept + k.x * x as f64 + k.c * c as f64 + k.u * u + k.h * h);
                }
            }
            cells.push((x as f64, c as f64, q, pc * px));
        }
    }
    solve_cells(&cells)
}
