//! The five experiments behind the CLI: each builds an [`ExperimentReport`]
//! of cells (estimates with uncertainty and references) and named acceptance
//! checks.
//!
//! Randomness layout: every run derives from `RngStream::new(config.seed)`,
//! with fixed top-level substreams — 0 the instance, 1 training /
//! initialization, 2 λ̄ tuning, 3 evaluation, 4 synthesized representations,
//! 5 auxiliary Monte Carlo. Tuning and evaluation never share a stream, and
//! every cell gets its own substream, so runs are bit-reproducible and cells
//! are statistically independent.

use nalgebra::DMatrix;

use crate::base_learner::Representation;
use crate::error::{Error, Result};
use crate::harness::config::{Experiment, ExperimentConfig};
use crate::harness::report::{CellResult, ExperimentReport, ModelDiagnostics, StderrTag};
use crate::objectives::{
    meta_test_loss_mc, trtr_mc, trva_mc, tune_lambda_bar, MonteCarloEstimate, SplitSpec,
};
use crate::oracle::{
    bad_rep_lower_bound, beta_estimate, inverse_wishart_trace, inverse_wishart_trace_mc,
    measure_spectrum_model, rank_scan, rank_scan_argmin, synthesize_representation, trtr_asymptotic,
    trva_closed_form, ExtReal, Spectrum, SpectrumModel,
};
use crate::rng::RngStream;
use crate::task_model::{make_instance, SubspaceInstance};
use crate::trainer::{
    finite_difference_gradient, init_representation, step_batch, step_eval, train, GradMode,
    InnerMode, TrainConfig, TrainedModel, Variant,
};

const STREAM_INSTANCE: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_TUNE: u64 = 2;
const STREAM_EVAL: u64 = 3;
const STREAM_SYNTH: u64 = 4;
const STREAM_AUX: u64 = 5;

/// Run one experiment end to end (no file output; see
/// [`crate::harness::report::write_report`] for that).
pub fn run(experiment: Experiment, config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    if let Some(named) = config.experiment {
        if named != experiment {
            return Err(Error::Config(format!(
                "config names experiment {named} but {experiment} was invoked"
            )));
        }
    }
    let start = std::time::Instant::now();
    let mut report = match experiment {
        Experiment::Table2 => run_table2(config)?,
        Experiment::OracleValidation => run_oracle_validation(config)?,
        Experiment::RankScan => run_rank_scan(config)?,
        Experiment::Gradcheck => run_gradcheck(config)?,
        Experiment::BoundsCheck => run_bounds_check(config)?,
    };
    report.seal(start.elapsed().as_secs_f64());
    Ok(report)
}

fn instance_for(config: &ExperimentConfig, root: RngStream) -> Result<SubspaceInstance> {
    make_instance(config.d, config.k, config.sigma, root.substream(STREAM_INSTANCE))
}

fn sampled_cell(
    cell: String,
    est: &MonteCarloEstimate,
    oracle: Option<ExtReal>,
    bound: Option<f64>,
    pass: Option<bool>,
    note: Option<String>,
) -> CellResult {
    CellResult {
        cell,
        estimate: ExtReal::Finite(est.mean),
        stderr: StderrTag::Sampled(est.stderr),
        oracle,
        bound,
        pass,
        note,
    }
}

/// |estimate − reference| within max(rel·|reference|, nses·stderr).
fn within_tolerance(est: &MonteCarloEstimate, reference: f64, rel: f64, nses: f64) -> bool {
    (est.mean - reference).abs() <= (rel * reference.abs()).max(nses * est.stderr)
}

fn diagnostics_of(label: &str, model: &TrainedModel) -> ModelDiagnostics {
    ModelDiagnostics {
        label: label.to_string(),
        nuclear_topk_share: model.spectral.nuclear_topk_share,
        frobenius_topk_share: model.spectral.frobenius_topk_share,
        numeric_rank: model.spectral.numeric_rank,
        max_angle_deg: model.alignment.max_angle_deg,
        principal_angles_deg: model.alignment.principal_angles_deg.clone(),
        projection_error: model.alignment.projection_error,
        first_objective: model.trace.first().map(|e| e.objective).unwrap_or(f64::NAN),
        final_objective: model.trace.last().map(|e| e.objective).unwrap_or(f64::NAN),
        exact_fallbacks: model.exact_fallbacks,
        tuned_lambda_bar: Vec::new(),
        singular_values: model.spectral.singular_values.clone(),
    }
}

// ---------------------------------------------------------------------------
// table2
// ---------------------------------------------------------------------------

/// Meta-test targets reproduced when the grid contains the matching n̄₁.
/// Values are the reference grid for (d=50, k=5, σ=0.5, n=16).
const PROJECTOR_TARGETS: [(usize, f64); 3] = [(5, 0.70), (15, 0.38), (25, 0.36)];
const IDENTITY_TARGETS: [(usize, f64); 3] = [(5, 1.10), (15, 0.99), (25, 0.97)];
const PROJECTOR_TOL: f64 = 0.05;
const IDENTITY_TOL: f64 = 0.15;
const TRVAL_NBAR15_MAX: f64 = 0.45;
const TRTR_GAP_MIN: f64 = 0.15;

// Per-row training recipes. The tr-tr rows use the coarse recipe: unit-scale
// initialization and large Adam steps. Their objective is minimized by
// interpolation almost immediately (an expressive representation fits its own
// training set), so what survives is a diffuse, noise-sustained spectrum.
// The split objective genuinely prefers a low-rank representation, but its
// minimizer is only reached with a far finer recipe: a near-zero
// initialization (no stale bulk to clean up), a truncated inner descent, tiny
// outer steps for many more of them, and a lopsided split. With an even
// split, few inner samples make shrinkage so valuable that the population
// optimum itself keeps a diffuse tail; holding out only two points moves the
// optimum to (numerically) rank k. The factor scales the fine recipe's step
// count off the coarse one so a shortened config shortens both.
const TRTR_OUTER_LR: f64 = 5e-2;
const TRVAL_HOLDOUT: usize = 2;
const TRVAL_INNER: InnerMode = InnerMode::Gd { steps: 30, lr: 0.05 };
const TRVAL_OUTER_LR: f64 = 2e-6;
const TRVAL_INIT_SCALE: f64 = 1e-3;
const TRVAL_STEPS_FACTOR: usize = 18;

enum RowKind {
    Fixed(Representation),
    Trained { variant: Variant, lambda: f64 },
}

fn table2_row_recipe(variant: Variant, lambda: f64, base: &TrainConfig) -> TrainConfig {
    match variant {
        Variant::TrTr => TrainConfig { variant, lambda, outer_lr: TRTR_OUTER_LR, ..base.clone() },
        Variant::TrVa => TrainConfig {
            variant,
            lambda,
            n1: base.n.saturating_sub(TRVAL_HOLDOUT),
            n2: TRVAL_HOLDOUT,
            inner_mode: TRVAL_INNER,
            outer_lr: TRVAL_OUTER_LR,
            init_scale: TRVAL_INIT_SCALE,
            outer_steps: base.outer_steps * TRVAL_STEPS_FACTOR,
            ..base.clone()
        },
    }
}

fn run_table2(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let root = RngStream::new(config.seed);
    let inst = instance_for(config, root)?;
    let mut report = ExperimentReport::new(Experiment::Table2, config);

    let rows: Vec<(&str, RowKind)> = vec![
        ("identity", RowKind::Fixed(Representation::identity(config.d))),
        ("tr-tr(lambda=0)", RowKind::Trained { variant: Variant::TrTr, lambda: 0.0 }),
        ("tr-tr(lambda=1)", RowKind::Trained { variant: Variant::TrTr, lambda: 1.0 }),
        ("tr-tr(lambda=10)", RowKind::Trained { variant: Variant::TrTr, lambda: 10.0 }),
        ("tr-val(lambda=0)", RowKind::Trained { variant: Variant::TrVa, lambda: 0.0 }),
        ("projector", RowKind::Fixed(Representation::new(inst.projector()))),
    ];

    // Build the representations (training where required) and the 6×|grid|
    // loss table, tuning λ̄ per (row, n̄₁) on a stream disjoint from evaluation.
    let mut reps: Vec<(String, Representation)> = Vec::new();
    let mut model_index: Vec<Option<usize>> = Vec::new();
    for (i, (label, kind)) in rows.into_iter().enumerate() {
        match kind {
            RowKind::Fixed(a) => {
                reps.push((label.to_string(), a));
                model_index.push(None);
            }
            RowKind::Trained { variant, lambda } => {
                let train_cfg = table2_row_recipe(variant, lambda, &config.train);
                let row_rng = root.substream(STREAM_TRAIN).substream(i as u64);
                match train(&inst, &train_cfg, row_rng) {
                    Ok(model) => {
                        report.models.push(diagnostics_of(label, &model));
                        model_index.push(Some(report.models.len() - 1));
                        reps.push((label.to_string(), model.a.clone()));
                    }
                    Err(Error::OptimizationDiverged { step, what }) => {
                        // A diverged row is recorded and evaluated at its
                        // initialization; the table's checks then fail loudly
                        // while the other rows still complete.
                        report.push_check(
                            &format!("{label}_training_converged"),
                            false,
                            format!("diverged at step {step} ({what})"),
                        );
                        let a = init_representation(
                            config.d,
                            train_cfg.rep_dim.unwrap_or(config.d),
                            train_cfg.init_scale,
                            row_rng.substream(0),
                        );
                        model_index.push(None);
                        reps.push((label.to_string(), a));
                    }
                    Err(other) => return Err(other),
                }
            }
        }
    }

    let mut grid: Vec<Vec<MonteCarloEstimate>> = Vec::new();
    for (i, (label, a)) in reps.iter().enumerate() {
        let mut row_estimates = Vec::new();
        for (j, &nbar1) in config.nbar1_grid.iter().enumerate() {
            let tune_rng = root.substream(STREAM_TUNE).substream(i as u64).substream(j as u64);
            let eval_rng = root.substream(STREAM_EVAL).substream(i as u64).substream(j as u64);
            let lambda_bar =
                tune_lambda_bar(a, &inst, nbar1, &config.lambda_bar_grid, config.tune_tasks, tune_rng)?;
            let est = meta_test_loss_mc(a, &inst, nbar1, lambda_bar, config.eval_tasks, eval_rng)?;
            if let Some(m) = model_index[i] {
                report.models[m].tuned_lambda_bar.push((nbar1, lambda_bar));
            }
            report.cells.push(sampled_cell(
                format!("{label} nbar1={nbar1}"),
                &est,
                None,
                None,
                None, // row-level verdicts are filled in below
                Some(format!("lambda_bar={lambda_bar}")),
            ));
            row_estimates.push(est);
        }
        let _ = label;
        grid.push(row_estimates);
    }

    // Row targets.
    let mut check_targets = |row: usize, name: &str, targets: &[(usize, f64)], tol: f64| {
        let mut ok = true;
        let mut parts = Vec::new();
        for (j, &nbar1) in config.nbar1_grid.iter().enumerate() {
            if let Some(&(_, want)) = targets.iter().find(|(n, _)| *n == nbar1) {
                let got = grid[row][j].mean;
                let hit = (got - want).abs() <= tol;
                ok &= hit;
                parts.push(format!("nbar1={nbar1}: {got:.4} vs {want} ±{tol}"));
                let cell_idx = row * config.nbar1_grid.len() + j;
                report.cells[cell_idx].oracle = Some(ExtReal::Finite(want));
                report.cells[cell_idx].pass = Some(hit);
            }
        }
        report.push_check(name, ok && !parts.is_empty(), parts.join("; "));
    };
    check_targets(5, "projector_row_targets", &PROJECTOR_TARGETS, PROJECTOR_TOL);
    check_targets(0, "identity_row_targets", &IDENTITY_TARGETS, IDENTITY_TOL);

    // Trained tr-val at n̄₁ = 15.
    if let Some(j15) = config.nbar1_grid.iter().position(|&n| n == 15) {
        let got = grid[4][j15].mean;
        let ok = got <= TRVAL_NBAR15_MAX;
        let cell_idx = 4 * config.nbar1_grid.len() + j15;
        report.cells[cell_idx].bound = Some(TRVAL_NBAR15_MAX);
        report.cells[cell_idx].pass = Some(ok);
        report.push_check(
            "trval_nbar15_threshold",
            ok,
            format!("tr-val(lambda=0) at nbar1=15: {got:.4} ≤ {TRVAL_NBAR15_MAX}"),
        );

        // Identity row must sit above both theoretical lower bounds (its
        // excess risk is what the bad-representation bound constrains).
        let bounds = bad_rep_lower_bound(config.d, 15, config.sigma);
        let id = &grid[0][j15];
        let excess = id.mean - config.sigma * config.sigma;
        let slack = 2.0 * id.stderr;
        let ok = excess >= bounds.main_text - slack && excess >= bounds.appendix - slack;
        let id_cell = j15;
        report.cells[id_cell].bound =
            Some(config.sigma * config.sigma + bounds.main_text.max(bounds.appendix));
        report.push_check(
            "identity_exceeds_lower_bounds",
            ok,
            format!(
                "excess {excess:.4} (±{:.4}) vs main-text {:.4} and appendix {:.4}",
                id.stderr, bounds.main_text, bounds.appendix
            ),
        );
    }

    // Every trained tr-tr row stays clearly worse than trained tr-val.
    {
        let mut ok = true;
        let mut parts = Vec::new();
        for row in 1..=3 {
            for (j, &nbar1) in config.nbar1_grid.iter().enumerate() {
                let gap = grid[row][j].mean - grid[4][j].mean;
                let hit = gap >= TRTR_GAP_MIN;
                ok &= hit;
                let cell_idx = row * config.nbar1_grid.len() + j;
                report.cells[cell_idx].pass = Some(hit);
                parts.push(format!("{} nbar1={nbar1}: gap {gap:.3}", reps[row].0));
            }
        }
        report.push_check(
            "trtr_minus_trval_gap",
            ok,
            format!("minimum required gap {TRTR_GAP_MIN}; {}", parts.join("; ")),
        );
    }

    // Low-rank recovery diagnostics of the trained models. A row whose
    // training diverged has no diagnostics and fails its check outright.
    let (ok_trval, detail_trval) =
        match report.models.iter().find(|m| m.label == "tr-val(lambda=0)") {
            Some(m) => (
                m.nuclear_topk_share >= 0.90 && m.max_angle_deg <= 1.0,
                format!(
                    "nuclear top-{} share {:.4} (≥ 0.90), max principal angle {:.4}° (≤ 1°)",
                    config.k, m.nuclear_topk_share, m.max_angle_deg
                ),
            ),
            None => (false, "tr-val training diverged; no diagnostics".to_string()),
        };
    let (ok_trtr0, detail_trtr0) =
        match report.models.iter().find(|m| m.label == "tr-tr(lambda=0)") {
            Some(m) => (
                m.nuclear_topk_share <= 0.50 && m.max_angle_deg >= 2.0,
                format!(
                    "nuclear top-{} share {:.4} (≤ 0.50), max principal angle {:.4}° (≥ 2°)",
                    config.k, m.nuclear_topk_share, m.max_angle_deg
                ),
            ),
            None => (false, "tr-tr training diverged; no diagnostics".to_string()),
        };
    report.push_check("trval_lowrank_diagnostics", ok_trval, detail_trval);
    report.push_check("trtr0_diffuse_diagnostics", ok_trtr0, detail_trtr0);

    Ok(report)
}

// ---------------------------------------------------------------------------
// oracle_validation
// ---------------------------------------------------------------------------

fn run_oracle_validation(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let root = RngStream::new(config.seed);
    let inst = instance_for(config, root)?;
    let mut report = ExperimentReport::new(Experiment::OracleValidation, config);
    let sigma = config.sigma;
    let n2 = if config.train.n2 >= 1 { config.train.n2 } else { 8 };

    // Closed-form cells spanning both branches and the boundary neighborhood.
    // Boundary-adjacent cells have finite mean but infinite per-task variance,
    // so they are reported without verdicts.
    let geometric: Vec<f64> = (0..30).map(|i| 2.0_f64.powf(-(i as f64) / 2.0)).collect();
    struct ClosedFormCell {
        label: &'static str,
        check: Option<&'static str>,
        model: SpectrumModel,
        n1: usize,
    }
    let cells = [
        ClosedFormCell {
            label: "trva r=5 e=0 n1=15",
            check: Some("underparam_closed_form"),
            model: SpectrumModel::isotropic(5, 0.0),
            n1: 15,
        },
        ClosedFormCell {
            label: "trva r=30 e=0 n1=8",
            check: Some("overparam_closed_form"),
            model: SpectrumModel::isotropic(30, 0.0),
            n1: 8,
        },
        ClosedFormCell {
            label: "trva r=8 e=0.4 n1=15",
            check: Some("mixed_energy_closed_form"),
            model: SpectrumModel::isotropic(8, 0.4),
            n1: 15,
        },
        ClosedFormCell {
            label: "trva r=13 e=0 n1=15 near-boundary",
            check: None,
            model: SpectrumModel::isotropic(13, 0.0),
            n1: 15,
        },
        ClosedFormCell {
            label: "trva r=17 e=0 n1=15 near-boundary",
            check: None,
            model: SpectrumModel::isotropic(17, 0.0),
            n1: 15,
        },
    ];

    for (idx, tc) in cells.iter().enumerate() {
        let a = synthesize_representation(&inst, &tc.model, root.substream(STREAM_SYNTH).substream(idx as u64))?;
        let measured = measure_spectrum_model(&a, &inst)?;
        let spec = SplitSpec { n1: tc.n1, n2, lambda: 0.0 };
        let est = trva_mc(&a, &inst, &spec, config.eval_tasks, root.substream(STREAM_EVAL).substream(idx as u64))?;
        let oracle = trva_closed_form(&tc.model, tc.n1, sigma)?;
        let (pass, detail) = match (tc.check, oracle.value) {
            (Some(_), ExtReal::Finite(v)) => {
                let ok = within_tolerance(&est, v, 0.03, 3.0);
                (Some(ok), format!("MC {:.4} ± {:.4} vs closed form {v:.4}", est.mean, est.stderr))
            }
            _ => (None, format!("MC {:.4} ± {:.4} (informational)", est.mean, est.stderr)),
        };
        if let Some(name) = tc.check {
            report.push_check(name, pass == Some(true), detail);
        }
        report.cells.push(sampled_cell(
            tc.label.to_string(),
            &est,
            Some(oracle.value),
            None,
            pass,
            Some(format!(
                "case={:?}; measured r={}, e={:.4}",
                oracle.case_tag, measured.r, measured.expressiveness
            )),
        ));
    }

    // Anisotropic spectrum: the closed form's bias term averages over task
    // placements relative to the spectral directions, so it matches a single
    // fixed representation only when task directions are exchangeable in the
    // spectral basis. Arrange exactly that: an instance whose task subspace
    // has dimension r, so the synthesized column space coincides with it and
    // tasks are isotropic on the spectral directions. The equality check is
    // then sound at Monte Carlo precision.
    let geometric_est = {
        let idx = cells.len() as u64;
        let model = SpectrumModel {
            r: 30,
            expressiveness: 0.0,
            spectrum: Spectrum::General { values: geometric.clone() },
        };
        let wide = make_instance(config.d, model.r, sigma, root.substream(STREAM_SYNTH).substream(10))?;
        let a = synthesize_representation(&wide, &model, root.substream(STREAM_SYNTH).substream(idx))?;
        let measured = measure_spectrum_model(&a, &wide)?;
        let spec = SplitSpec { n1: 8, n2, lambda: 0.0 };
        let est = trva_mc(&a, &wide, &spec, config.eval_tasks, root.substream(STREAM_EVAL).substream(idx))?;
        let oracle = trva_closed_form(&model, 8, sigma)?;
        let v = oracle.value.finite().expect("overparam value is finite");
        let ok = within_tolerance(&est, v, 0.03, 3.0);
        report.push_check(
            "anisotropic_closed_form",
            ok,
            format!("MC {:.4} ± {:.4} vs closed form {v:.4}", est.mean, est.stderr),
        );
        report.cells.push(sampled_cell(
            "trva r=30 geometric-spectrum n1=8".to_string(),
            &est,
            Some(oracle.value),
            None,
            Some(ok),
            Some(format!(
                "case={:?}; task subspace = column space; measured r={}, e={:.4}",
                oracle.case_tag, measured.r, measured.expressiveness
            )),
        ));
        est
    };

    // β ≥ 0: the anisotropic value must not fall below the isotropic closed
    // form at the same (r, e), and the β estimator itself must agree.
    {
        let est = geometric_est;
        let iso = trva_closed_form(&SpectrumModel::isotropic(30, 0.0), 8, sigma)?
            .value
            .finite()
            .expect("overparam value is finite");
        let beta = beta_estimate(&geometric, 8, 0.0, sigma, 4_000, root.substream(STREAM_AUX).substream(7))?;
        let ok = est.mean >= iso - 3.0 * est.stderr && beta.mean >= -3.0 * beta.stderr;
        report.push_check(
            "beta_nonnegativity",
            ok,
            format!(
                "anisotropic MC {:.4} vs isotropic closed form {iso:.4}; β = {:.4} ± {:.4}",
                est.mean, beta.mean, beta.stderr
            ),
        );
    }

    // Divergence signature at r = n1: batch medians blow past 10× the last
    // finite underparam value (r = n1 − 2).
    {
        let n1 = 15;
        let a = synthesize_representation(
            &inst,
            &SpectrumModel::isotropic(n1, 0.0),
            root.substream(STREAM_SYNTH).substream(50),
        )?;
        let reference = trva_closed_form(&SpectrumModel::isotropic(n1 - 2, 0.0), n1, sigma)?
            .value
            .finite()
            .expect("r = n1 − 2 is underparam");
        let threshold = 10.0 * reference;
        let batches = 100usize;
        let per_batch = (config.aux_tasks / batches).max(2);
        let mut means = Vec::with_capacity(batches);
        let spec = SplitSpec { n1, n2, lambda: 0.0 };
        for b in 0..batches {
            let est = trva_mc(
                &a,
                &inst,
                &spec,
                per_batch,
                root.substream(STREAM_AUX).substream(1_000 + b as u64),
            )?;
            means.push(est.mean);
        }
        means.sort_by(f64::total_cmp);
        let median = 0.5 * (means[batches / 2] + means[(batches - 1) / 2]);
        let ok = median > threshold;
        report.cells.push(CellResult {
            cell: "trva r=15 n1=15 divergence signature".into(),
            estimate: ExtReal::Finite(median),
            stderr: StderrTag::Analytic,
            oracle: Some(ExtReal::Infinite),
            bound: Some(threshold),
            pass: Some(ok),
            note: Some(format!(
                "median of {batches} batch means ({per_batch} tasks each); threshold 10×{reference:.2}"
            )),
        });
        report.push_check(
            "trva_boundary_divergence",
            ok,
            format!("median batch mean {median:.1} > {threshold:.1}"),
        );
    }

    // Split-objective ↔ meta-test agreement: with λ̄ = λ = 0 and n̄₁ = n₁,
    // both estimators target the same expectation, for any representation.
    {
        let n1 = 15;
        let spec = SplitSpec { n1, n2, lambda: 0.0 };
        let reps: Vec<(String, Representation)> = vec![
            (
                "agreement gaussian D=d".into(),
                init_representation(config.d, config.d, 1.0, root.substream(STREAM_TRAIN).substream(0)),
            ),
            (
                "agreement gaussian D=20".into(),
                init_representation(config.d, 20, 1.0, root.substream(STREAM_TRAIN).substream(1)),
            ),
            (
                "agreement synthesized r=8 e=0.25".into(),
                synthesize_representation(
                    &inst,
                    &SpectrumModel::isotropic(8, 0.25),
                    root.substream(STREAM_SYNTH).substream(60),
                )?,
            ),
        ];
        let mut ok = true;
        let mut parts = Vec::new();
        for (i, (label, a)) in reps.iter().enumerate() {
            let va = trva_mc(&a.clone(), &inst, &spec, config.eval_tasks, root.substream(STREAM_EVAL).substream(50 + i as u64))?;
            let mt = meta_test_loss_mc(a, &inst, n1, 0.0, config.eval_tasks, root.substream(STREAM_EVAL).substream(60 + i as u64))?;
            let diff = (va.mean - mt.mean).abs();
            let tol = 3.0 * va.combined_stderr(&mt);
            let hit = diff <= tol;
            ok &= hit;
            parts.push(format!("{label}: |{:.4} − {:.4}| = {diff:.4} ≤ {tol:.4}", va.mean, mt.mean));
            report.cells.push(CellResult {
                cell: label.clone(),
                estimate: ExtReal::Finite(diff),
                stderr: StderrTag::Sampled(va.combined_stderr(&mt)),
                oracle: Some(ExtReal::Finite(0.0)),
                bound: Some(tol),
                pass: Some(hit),
                note: Some(format!("trva {:.4} ± {:.4}; meta-test {:.4} ± {:.4}", va.mean, va.stderr, mt.mean, mt.stderr)),
            });
        }
        report.push_check("split_metatest_agreement", ok, parts.join("; "));
    }

    // Inverse-Wishart trace identity and its boundary divergence.
    {
        let ident = 5.0 / 9.0;
        let est = inverse_wishart_trace_mc(15, 5, config.wishart_samples, root.substream(STREAM_AUX).substream(0))?;
        let ok = (est.mean - ident).abs() <= 0.02 * ident;
        report.cells.push(sampled_cell(
            "wishart 15x5".into(),
            &est,
            Some(inverse_wishart_trace(15, 5)),
            None,
            Some(ok),
            None,
        ));
        report.push_check(
            "wishart_identity",
            ok,
            format!("MC {:.5} vs 5/9 = {ident:.5} (2% tolerance)", est.mean),
        );

        let small = inverse_wishart_trace_mc(7, 5, config.aux_tasks, root.substream(STREAM_AUX).substream(1))?;
        report.cells.push(sampled_cell(
            "wishart 7x5".into(),
            &small,
            Some(inverse_wishart_trace(7, 5)),
            None,
            None,
            Some("heavy-tailed at this size; informational".into()),
        ));

        let boundary =
            inverse_wishart_trace_mc(6, 5, config.wishart_samples, root.substream(STREAM_AUX).substream(2))?;
        let threshold = 10.0 * ident;
        let ok = boundary.mean > threshold;
        report.cells.push(sampled_cell(
            "wishart 6x5 divergence".into(),
            &boundary,
            Some(inverse_wishart_trace(6, 5)),
            Some(threshold),
            Some(ok),
            Some("running mean grows without bound at the boundary".into()),
        ));
        report.push_check(
            "wishart_boundary_divergence",
            ok,
            format!("running mean {:.2} > 10 × 5/9 = {threshold:.2}", boundary.mean),
        );
    }

    Ok(report)
}

// ---------------------------------------------------------------------------
// rank_scan
// ---------------------------------------------------------------------------

fn run_rank_scan(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let mut report = ExperimentReport::new(Experiment::RankScan, config);
    let (d, k, n1, sigma) = (config.d, config.k, config.scan_n1, config.sigma);
    let profile = rank_scan(d, k, n1, sigma)?;

    for (r, value) in &profile {
        report.cells.push(CellResult {
            cell: format!("r={r}"),
            estimate: *value,
            stderr: StderrTag::Analytic,
            oracle: None,
            bound: None,
            pass: None,
            note: None,
        });
    }

    // The divergence band is exactly |r − n1| ≤ 1.
    let band_ok = profile
        .iter()
        .all(|(r, v)| v.is_finite() == (r.abs_diff(n1) > 1));
    report.push_check(
        "divergence_band",
        band_ok,
        format!("infinite exactly on r ∈ [{}, {}]", n1.saturating_sub(1), n1 + 1),
    );

    let conditions = n1 >= 2 * k + 2 && sigma * sigma < (n1 as f64 - k as f64 - 1.0) / (3.0 * k as f64);
    let argmin = rank_scan_argmin(&profile);
    report.cells.push(CellResult {
        cell: "argmin".into(),
        estimate: argmin.map(|r| ExtReal::Finite(r as f64)).unwrap_or(ExtReal::Infinite),
        stderr: StderrTag::Analytic,
        oracle: Some(ExtReal::Finite(k as f64)),
        bound: None,
        pass: conditions.then(|| argmin == Some(k)),
        note: Some(format!(
            "low-rank-optimum conditions (n1 ≥ 2k+2, σ² < (n1−k−1)/(3k)) hold: {conditions}"
        )),
    });
    if conditions {
        report.push_check(
            "argmin_equals_k",
            argmin == Some(k),
            format!("argmin {:?} vs k = {k}", argmin),
        );
    }

    if sigma == 0.0 && n1 >= k + 2 {
        // Noiseless: every rank in [k, n1−2] scores exactly 0.
        let tie_ok = profile
            .iter()
            .filter(|(r, _)| (k..=n1 - 2).contains(r))
            .all(|(_, v)| *v == ExtReal::Finite(0.0));
        report.push_check(
            "noiseless_tie_set",
            tie_ok,
            format!("ranks {k}..={} all at exactly 0", n1 - 2),
        );
    }

    Ok(report)
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

const GRADCHECK_TOL: f64 = 1e-4;
const FLAT_GRAD_TOL: f64 = 1e-10;
const FD_STEP: f64 = 1e-5;

/// Worst entry difference relative to the finite-difference gradient's
/// max-norm (entrywise ratios blow up on incidental zeros).
fn max_rel_error(got: &DMatrix<f64>, want: &DMatrix<f64>) -> f64 {
    let scale = want.iter().fold(0.0_f64, |m, x| m.max(x.abs())).max(1e-12);
    got.iter()
        .zip(want.iter())
        .fold(0.0_f64, |worst, (g, w)| worst.max((g - w).abs() / scale))
}

fn run_gradcheck(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let root = RngStream::new(config.seed);
    let mut report = ExperimentReport::new(Experiment::Gradcheck, config);
    // Finite differences need a small instance; the ambient problem size is
    // fixed here and independent of the main experiments' d.
    let (d, k) = (6, 2);
    let inst = make_instance(d, k, config.sigma, root.substream(STREAM_INSTANCE))?;

    // The λ = 0 scenario uses D < d so the fit has full column rank (the
    // min-norm solution is differentiable) while col(XA) still varies with
    // A; a square invertible A would pin col(XA) = col(X) and make the
    // tr-tr objective locally constant.
    let scenarios: Vec<(&str, usize, TrainConfig)> = vec![
        (
            "exact vs fd: tr-val lambda=0.5",
            d,
            TrainConfig {
                variant: Variant::TrVa,
                lambda: 0.5,
                n: 8,
                n1: 4,
                n2: 4,
                batch_tasks: 3,
                grad_mode: GradMode::Exact,
                ..TrainConfig::default()
            },
        ),
        (
            "exact vs fd: tr-tr lambda=0.3",
            d,
            TrainConfig {
                variant: Variant::TrTr,
                lambda: 0.3,
                n: 10,
                batch_tasks: 3,
                grad_mode: GradMode::Exact,
                ..TrainConfig::default()
            },
        ),
        (
            "exact vs fd: tr-tr lambda=0 full-column-rank",
            4,
            TrainConfig {
                variant: Variant::TrTr,
                lambda: 0.0,
                n: 10,
                batch_tasks: 3,
                grad_mode: GradMode::Exact,
                ..TrainConfig::default()
            },
        ),
    ];

    let mut all_ok = true;
    let mut parts = Vec::new();
    let mut first_scenario = None;
    for (idx, (label, dd, cfg)) in scenarios.iter().enumerate() {
        let a = init_representation(d, *dd, 1.0, root.substream(STREAM_TRAIN).substream(idx as u64));
        let batch = step_batch(&inst, cfg, root.substream(STREAM_EVAL).substream(idx as u64), 0)?;
        let eval = step_eval(&a, &batch, cfg)?;
        let fd = finite_difference_gradient(&a, &batch, cfg, FD_STEP)?;
        let err = max_rel_error(&eval.grad, &fd);
        let ok = err <= GRADCHECK_TOL && eval.exact_fallbacks == 0;
        all_ok &= ok;
        parts.push(format!("{label}: max rel err {err:.2e}"));
        report.cells.push(CellResult {
            cell: (*label).to_string(),
            estimate: ExtReal::Finite(err),
            stderr: StderrTag::Analytic,
            oracle: Some(ExtReal::Finite(0.0)),
            bound: Some(GRADCHECK_TOL),
            pass: Some(ok),
            note: None,
        });
        if idx == 0 {
            first_scenario = Some((a, batch, eval.grad.clone(), err));
        }
    }
    report.push_check("exact_matches_finite_differences", all_ok, parts.join("; "));

    // λ = 0 with n1 < D: the min-norm solution is not differentiable through
    // the normal equations, and exact mode must fall back (per task).
    {
        let cfg = TrainConfig {
            variant: Variant::TrVa,
            lambda: 0.0,
            n: 8,
            n1: 4,
            n2: 4,
            batch_tasks: 3,
            grad_mode: GradMode::Exact,
            ..TrainConfig::default()
        };
        let a = init_representation(d, d, 1.0, root.substream(STREAM_TRAIN).substream(10));
        let batch = step_batch(&inst, &cfg, root.substream(STREAM_EVAL).substream(10), 0)?;
        let eval = step_eval(&a, &batch, &cfg)?;
        let first = step_eval(&a, &batch, &TrainConfig { grad_mode: GradMode::FirstOrder, ..cfg.clone() })?;
        let ok = eval.exact_fallbacks == cfg.batch_tasks && eval.grad == first.grad;
        report.cells.push(CellResult {
            cell: "exact fallback: tr-val lambda=0 rank-deficient".into(),
            estimate: ExtReal::Finite(eval.exact_fallbacks as f64),
            stderr: StderrTag::Analytic,
            oracle: Some(ExtReal::Finite(cfg.batch_tasks as f64)),
            bound: None,
            pass: Some(ok),
            note: Some("falls back to the first-order gradient per task".into()),
        });
        report.push_check(
            "min_norm_fallback",
            ok,
            format!("{} of {} tasks fell back; gradients identical", eval.exact_fallbacks, cfg.batch_tasks),
        );
    }

    // Huge λ freezes w̃ ≈ 0 and flattens the first-order outer loss.
    {
        let cfg = TrainConfig {
            variant: Variant::TrVa,
            lambda: 1e12,
            n: 8,
            n1: 4,
            n2: 4,
            batch_tasks: 3,
            ..TrainConfig::default()
        };
        let a = init_representation(d, d, 1.0, root.substream(STREAM_TRAIN).substream(11));
        let batch = step_batch(&inst, &cfg, root.substream(STREAM_EVAL).substream(11), 0)?;
        let grad_norm = step_eval(&a, &batch, &cfg)?.grad.norm();
        let ok = grad_norm <= FLAT_GRAD_TOL;
        report.cells.push(CellResult {
            cell: "first-order gradient at lambda=1e12".into(),
            estimate: ExtReal::Finite(grad_norm),
            stderr: StderrTag::Analytic,
            oracle: Some(ExtReal::Finite(0.0)),
            bound: Some(FLAT_GRAD_TOL),
            pass: Some(ok),
            note: None,
        });
        report.push_check("flat_gradient_at_huge_lambda", ok, format!("‖∇‖ = {grad_norm:.2e}"));
    }

    // Re-running the first scenario reproduces its gradient bit for bit.
    {
        let (a, batch, grad, err) = first_scenario.expect("scenario 0 ran");
        let again = step_eval(&a, &batch, &scenarios[0].2)?;
        let max_diff = (&again.grad - &grad).abs().max();
        let ok = max_diff == 0.0;
        report.cells.push(CellResult {
            cell: "deterministic repeat".into(),
            estimate: ExtReal::Finite(max_diff),
            stderr: StderrTag::Analytic,
            oracle: Some(ExtReal::Finite(0.0)),
            bound: Some(0.0),
            pass: Some(ok),
            note: Some(format!("scenario 0 re-evaluated; original max rel err {err:.2e}")),
        });
        report.push_check("deterministic_repeat", ok, format!("max entry diff {max_diff:e}"));
    }

    Ok(report)
}

// ---------------------------------------------------------------------------
// bounds_check
// ---------------------------------------------------------------------------

const BAD_REP_KAPPA: f64 = 1e3;
const INTERPOLATION_TOL: f64 = 1e-4;
const RESIDUAL_REL_TOL: f64 = 0.05;

fn run_bounds_check(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let root = RngStream::new(config.seed);
    let inst = instance_for(config, root)?;
    let mut report = ExperimentReport::new(Experiment::BoundsCheck, config);
    let sigma = config.sigma;
    let bad = Representation::identity(config.d).scaled(BAD_REP_KAPPA);

    // Interpolation: with n ≤ d the scaled identity drives the tr-tr
    // training residual to (numerically) zero even at λ = 1.
    {
        let n = config.train.n;
        let est = trtr_mc(&bad, &inst, n, 1.0, config.aux_tasks, root.substream(STREAM_AUX).substream(0))?;
        let floor = trtr_asymptotic(n, config.d, sigma);
        let ok = if floor == 0.0 {
            est.mean <= INTERPOLATION_TOL
        } else {
            within_tolerance(&est, floor, RESIDUAL_REL_TOL, 3.0)
        };
        report.cells.push(sampled_cell(
            format!("trtr kappa-identity n={n}"),
            &est,
            Some(ExtReal::Finite(floor)),
            Some(if floor == 0.0 { INTERPOLATION_TOL } else { floor }),
            Some(ok),
            Some(format!("kappa={BAD_REP_KAPPA}, lambda=1")),
        ));
        report.push_check(
            "interpolation_floor",
            ok,
            format!("mean residual {:.2e} (floor {floor})", est.mean),
        );
    }

    // Past interpolation (n > d) the residual settles at σ²(n−d)/n.
    {
        let n = 2 * config.d;
        let est = trtr_mc(&bad, &inst, n, 1.0, config.aux_tasks, root.substream(STREAM_AUX).substream(1))?;
        let floor = trtr_asymptotic(n, config.d, sigma);
        let ok = (est.mean - floor).abs() <= RESIDUAL_REL_TOL * floor.max(f64::MIN_POSITIVE);
        report.cells.push(sampled_cell(
            format!("trtr kappa-identity n={n}"),
            &est,
            Some(ExtReal::Finite(floor)),
            None,
            Some(ok),
            Some(format!("kappa={BAD_REP_KAPPA}, lambda=1; residual floor σ²(n−d)/n")),
        ));
        report.push_check(
            "residual_floor",
            ok,
            format!("mean residual {:.5} vs σ²(n−d)/n = {floor:.5} (5% tolerance)", est.mean),
        );
    }

    // The tr-tr-optimal representation pays the theoretical meta-test price:
    // its tuned excess risk exceeds both printed lower-bound variants.
    {
        let nbar1 = 15;
        let lambda_bar = tune_lambda_bar(
            &bad,
            &inst,
            nbar1,
            &config.lambda_bar_grid,
            config.tune_tasks,
            root.substream(STREAM_TUNE).substream(0),
        )?;
        let est = meta_test_loss_mc(&bad, &inst, nbar1, lambda_bar, config.eval_tasks, root.substream(STREAM_EVAL).substream(0))?;
        let bounds = bad_rep_lower_bound(config.d, nbar1, sigma);
        let excess = est.mean - sigma * sigma;
        let slack = 2.0 * est.stderr;
        let ok = excess >= bounds.main_text - slack && excess >= bounds.appendix - slack;
        report.cells.push(sampled_cell(
            format!("meta-test kappa-identity nbar1={nbar1}"),
            &est,
            None,
            Some(sigma * sigma + bounds.main_text.max(bounds.appendix)),
            Some(ok),
            Some(format!("lambda_bar={lambda_bar}; excess {excess:.4}")),
        ));
        report.push_check(
            "bad_rep_lower_bounds",
            ok,
            format!(
                "excess {excess:.4} (±{:.4}) ≥ main-text {:.4} and appendix {:.4}",
                est.stderr, bounds.main_text, bounds.appendix
            ),
        );
    }

    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::report::{spectrum_csv, table_csv};

    /// Budgets small enough for unit tests; statistical verdicts are not
    /// asserted here (the acceptance suite runs the full budgets).
    fn smoke_config() -> ExperimentConfig {
        ExperimentConfig {
            eval_tasks: 60,
            tune_tasks: 20,
            aux_tasks: 200,
            wishart_samples: 300,
            train: TrainConfig { outer_steps: 2, batch_tasks: 4, ..TrainConfig::default() },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn rank_scan_defaults_pass() {
        let report = run(Experiment::RankScan, &ExperimentConfig::default()).unwrap();
        assert!(report.all_passed, "checks: {:?}", report.checks);
        assert_eq!(report.cells.len(), 51); // 50 ranks + argmin
        let argmin = report.cells.last().unwrap();
        assert_eq!(argmin.estimate, ExtReal::Finite(5.0));
        assert_eq!(argmin.pass, Some(true));
    }

    #[test]
    fn rank_scan_noiseless_reports_tie_set() {
        let config = ExperimentConfig { sigma: 0.0, ..ExperimentConfig::default() };
        let report = run(Experiment::RankScan, &config).unwrap();
        assert!(report.checks.iter().any(|c| c.name == "noiseless_tie_set" && c.passed));
        assert!(report.all_passed);
    }

    #[test]
    fn gradcheck_defaults_pass() {
        let report = run(Experiment::Gradcheck, &ExperimentConfig::default()).unwrap();
        assert!(report.all_passed, "checks: {:?}", report.checks);
        assert_eq!(report.checks.len(), 4);
    }

    #[test]
    fn table2_smoke_produces_full_structure() {
        let config = smoke_config();
        let report = run(Experiment::Table2, &config).unwrap();
        assert_eq!(report.cells.len(), 18);
        assert_eq!(report.models.len(), 4);
        for m in &report.models {
            assert_eq!(m.tuned_lambda_bar.len(), 3);
            assert_eq!(m.singular_values.len(), 50);
        }
        assert_eq!(report.checks.len(), 7);
        // Views render without panicking and carry every cell/model.
        assert_eq!(table_csv(&report).lines().count(), 19);
        assert_eq!(spectrum_csv(&report).lines().count(), 1 + 4 * 50);
    }

    #[test]
    fn oracle_validation_smoke_produces_full_structure() {
        let config = smoke_config();
        let report = run(Experiment::OracleValidation, &config).unwrap();
        // 6 closed-form cells + divergence + 3 agreement + 3 wishart.
        assert_eq!(report.cells.len(), 13);
        assert_eq!(report.checks.len(), 9);
        assert!(report.models.is_empty());
    }

    #[test]
    fn bounds_check_smoke_produces_full_structure() {
        let config = smoke_config();
        let report = run(Experiment::BoundsCheck, &config).unwrap();
        assert_eq!(report.cells.len(), 3);
        assert_eq!(report.checks.len(), 3);
        // The interpolation cell is not statistical; it passes even at
        // smoke budgets.
        assert!(report.checks.iter().any(|c| c.name == "interpolation_floor" && c.passed));
    }

    #[test]
    fn mismatched_experiment_name_is_rejected() {
        let config = ExperimentConfig {
            experiment: Some(Experiment::Table2),
            ..ExperimentConfig::default()
        };
        assert!(matches!(run(Experiment::RankScan, &config), Err(Error::Config(_))));
    }

    #[test]
    fn reports_are_reproducible_modulo_wall_clock() {
        let mut r1 = run(Experiment::RankScan, &ExperimentConfig::default()).unwrap();
        let mut r2 = run(Experiment::RankScan, &ExperimentConfig::default()).unwrap();
        r1.wall_clock_seconds = 0.0;
        r2.wall_clock_seconds = 0.0;
        assert_eq!(r1, r2);
    }
}
