//! Straight-line re-derivation of the sequential engine for the unsmoothed
//! D-optimal objective: `Y = (I + U)^-1` by Gauss-Jordan and `z` by
//! composite Simpson, independent of the eigensolver and adaptive quadrature.

use psd_online::bench::gen_adversarial;
use psd_online::budget::{BudgetSmoother, Variant};
use psd_online::lowner::SmoothedObjective;
use psd_online::online::OnlineEngine;
use psd_online::{TraceObjective, E_MINUS_ONE};

fn inverse(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = m.len();
    let mut a: Vec<Vec<f64>> = m
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            r
        })
        .collect();
    for col in 0..n {
        let piv = (col..n).max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs())).unwrap();
        a.swap(col, piv);
        let d = a[col][col];
        for v in a[col].iter_mut() {
            *v /= d;
        }
        for r in 0..n {
            if r != col {
                let f = a[r][col];
                let pivot_row = a[col].clone();
                for (v, p) in a[r].iter_mut().zip(pivot_row) {
                    *v -= f * p;
                }
            }
        }
    }
    a.into_iter().map(|r| r[n..].to_vec()).collect()
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    let h = (b - a) / panels as f64;
    let mut s = f(a) + f(b);
    for k in 1..panels {
        s += if k % 2 == 1 { 4.0 } else { 2.0 } * f(a + k as f64 * h);
    }
    s * h / 3.0
}

/// `-(gamma theta / (b_eff (e - 1))) e^{r u} int_0^u e^{-r v} / (1 + theta v) dv`
fn z_reference(sm: &BudgetSmoother, u: f64) -> f64 {
    if u <= 0.0 {
        return 0.0;
    }
    let b_eff = sm.b + sm.rho1 * sm.gamma;
    let r = sm.gamma / b_eff;
    let integral = simpson(|v| (-r * v).exp() / (1.0 + sm.theta * v), 0.0, u, 4000);
    -(sm.gamma * sm.theta / (b_eff * E_MINUS_ONE)) * (r * u).exp() * integral
}

#[test]
fn sequential_engine_matches_straight_line_reference() {
    for (seed, gamma) in [(3u64, 1.0), (4, 2.0), (5, 4.0)] {
        let inst = gen_adversarial(5, 20, 4.0, seed).unwrap();
        let n = inst.n;
        let st = inst.stats;
        let sm = BudgetSmoother::new(
            TraceObjective::DOptimal,
            Variant::Sequential,
            gamma,
            inst.b,
            st.theta,
            st.theta_max,
            st.rho1,
        )
        .unwrap();
        let smoothed = SmoothedObjective::unsmoothed(TraceObjective::DOptimal).unwrap();
        let mut engine = OnlineEngine::new(smoothed, sm.clone(), n, false).unwrap();
        engine.run(&inst.arrivals).unwrap();
        let trace = engine.trace();

        let mut u_mat = vec![vec![0.0; n]; n];
        let mut y: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        let (mut used, mut z) = (0.0, 0.0);
        let mut accepted = 0;
        for (t, arr) in inst.arrivals.iter().enumerate() {
            let a = arr.a.rows();
            let score: f64 = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| a[i][j] * y[i][j]).sum();
            let x = if arr.c * z + score > 0.0 { 1.0 } else { 0.0 };
            assert_eq!(trace.steps[t].x, x, "seed {seed} gamma {gamma} step {t}");
            if x > 0.0 {
                accepted += 1;
                for i in 0..n {
                    for j in 0..n {
                        u_mat[i][j] += a[i][j];
                    }
                }
                used += arr.c;
                let shifted: Vec<Vec<f64>> = (0..n)
                    .map(|i| (0..n).map(|j| u_mat[i][j] + if i == j { 1.0 } else { 0.0 }).collect())
                    .collect();
                y = inverse(&shifted);
                z = z_reference(&sm, used);
            }
            assert!((trace.steps[t].u - used).abs() <= 1e-12);
            assert!((trace.steps[t].z - z).abs() <= 1e-8 * (1.0 + z.abs()), "z {} vs {z}", trace.steps[t].z);
            assert!((trace.steps[t].score_prev - score).abs() <= 1e-10);
        }
        assert!(accepted > 0 && accepted < inst.m(), "seed {seed}: {accepted} accepted");
    }
}
