use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use fdrecon::iterative::{iterative_reconstruct, IterationPlan};
use fdrecon::scores::{ce_scores, integral_scores, write_scores_csv};
use fdrecon::simulation::{run_study, DgpConfig, DgpId};
use fdrecon::{load_dataset, Curve, FunctionalDataset, Method, ModelConfig, ReconstructedCurve, ReconstructionModel, Subdomain};
use rayon::prelude::*;

use crate::args::{Command, FitArgs, GcvArgs, ModelArgs, ReconstructArgs, ScoreKind, SimulateArgs};
use crate::Failure;

pub fn run(command: &Command, comment: &str) -> Result<(), Failure> {
    match command {
        Command::Fit(a) => fit(a, comment),
        Command::Reconstruct(a) => reconstruct(a, comment),
        Command::Simulate(a) => simulate(a, comment),
        Command::GcvReport(a) => gcv_report(a, comment),
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// Checks every setting before any data is read.
fn validate(m: &ModelArgs) -> Result<(), Failure> {
    if m.grid_len < 2 {
        return Err(usage("grid-len must be at least 2"));
    }
    if m.min_pairs < 1 {
        return Err(usage("min-pairs must be at least 1"));
    }
    if !(0.0..0.5).contains(&m.trim_fraction) {
        return Err(usage(format!("trim-fraction must lie in [0, 0.5), got {}", m.trim_fraction)));
    }
    if !(0.0..1.0).contains(&m.lambda_floor) {
        return Err(usage(format!("lambda-floor must lie in [0, 1), got {}", m.lambda_floor)));
    }
    if !(0.0..0.5).contains(&m.complete_margin) {
        return Err(usage(format!("complete-margin must lie in [0, 0.5), got {}", m.complete_margin)));
    }
    Ok(())
}

fn model_config(m: &ModelArgs, error_variance: bool) -> ModelConfig {
    ModelConfig {
        h_x: m.h_x,
        h_mu: m.h_mu,
        h_gamma: m.h_gamma,
        min_pairs: m.min_pairs,
        trim_fraction: m.trim_fraction,
        lambda_rel_floor: m.lambda_floor,
        complete_margin: m.complete_margin,
        quadrature: m.quadrature.into(),
        error_variance,
    }
}

fn load_and_fit(m: &ModelArgs, error_variance: bool) -> Result<(FunctionalDataset, ReconstructionModel), Failure> {
    validate(m)?;
    let data = load_dataset(&m.input, m.domain, m.grid_len)?;
    let model = ReconstructionModel::fit(&data, model_config(m, error_variance))?;
    Ok((data, model))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Io(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> io::Result<()>) -> Result<(), Failure> {
    let io_err = |e: io::Error| Failure::Io(format!("cannot write {}: {e}", path.display()));
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    body(&mut w).and_then(|()| w.flush()).map_err(io_err)
}

fn fit(a: &FitArgs, comment: &str) -> Result<(), Failure> {
    let (data, model) = load_and_fit(&a.model, false)?;
    let bw = model.bandwidths;
    let comment = format!(
        "{comment} resolved h-x={} h-mu={} h-gamma={} sigma2={}",
        bw.h_x, bw.h_mu, bw.h_gamma, model.sigma2.sigma2
    );
    let c = Some(comment.as_str());
    create_dir(&a.out_dir)?;
    write_file(&a.out_dir.join("mean.csv"), |w| model.mean.write_csv(w, c))?;
    write_file(&a.out_dir.join("covariance.csv"), |w| model.cov.write_surface_csv(w, c))?;
    write_file(&a.out_dir.join("mask.csv"), |w| model.cov.write_mask_csv(w, c))?;
    match &model.full_eigsys {
        Some(eig) => write_file(&a.out_dir.join("eigensystem.csv"), |w| eig.write_csv(w, c))?,
        None => eprintln!("warning: covariance is not estimable on the whole domain; eigensystem.csv not written"),
    }
    if a.emit_scores {
        let scores: Vec<_> = data
            .curves()
            .par_iter()
            .map(|curve| {
                let eig = model.eigensystem(&model.curve_subdomain(curve)?)?;
                let k = eig.k_available();
                match a.score_method {
                    ScoreKind::Integral => integral_scores(curve, &eig, &model.mean, k, model.config.quadrature),
                    ScoreKind::Ce => ce_scores(curve, &eig, &model.cov, model.sigma2, &model.mean, k),
                }
            })
            .collect();
        let mut kept = Vec::with_capacity(scores.len());
        for (curve, s) in data.curves().iter().zip(scores) {
            match s {
                Ok(s) => kept.push(s),
                Err(e) => eprintln!("warning: no scores for curve {}: {e}", curve.id()),
            }
        }
        write_file(&a.out_dir.join("scores.csv"), |w| write_scores_csv(w, &kept, c))?;
    }

    let complete = model.complete_curves().len();
    println!("curves: {} ({complete} complete)", data.curves().len());
    println!("bandwidths: h_x={} h_mu={} h_gamma={}", bw.h_x, bw.h_mu, bw.h_gamma);
    println!("sigma2: {}", model.sigma2.sigma2);
    println!("mask coverage: {:.1}%", 100.0 * model.cov.coverage());
    match &model.full_eigsys {
        Some(eig) => println!("K_available: {}", eig.k_available()),
        None => println!("K_available: none (covariance not estimable on the whole domain)"),
    }
    Ok(())
}

/// File name for a curve id: anything outside `[A-Za-z0-9._-]` becomes `_`.
fn file_stem(id: &str) -> String {
    id.chars()
        .map(|ch| if ch.is_ascii_alphanumeric() || matches!(ch, '.' | '_' | '-') { ch } else { '_' })
        .collect()
}

fn select<'a>(data: &'a FunctionalDataset, ids: Option<&[String]>) -> Result<Vec<&'a Curve>, Failure> {
    match ids {
        None => Ok(data.curves().iter().collect()),
        Some(ids) => ids
            .iter()
            .map(|id| data.curve(id).ok_or_else(|| usage(format!("no curve with id {id:?}"))))
            .collect(),
    }
}

fn reconstruct(a: &ReconstructArgs, comment: &str) -> Result<(), Failure> {
    let plan = if a.iterative {
        Some(IterationPlan::new(a.strategy, a.rmax, a.truncation).map_err(|e| usage(e.to_string()))?)
    } else {
        None
    };
    if a.iterative && matches!(a.method, Method::Pace | Method::Kraus) {
        return Err(usage(format!("--iterative does not support {}", a.method)));
    }
    let (data, model) = load_and_fit(&a.model, a.error_variance)?;
    let curves = select(&data, a.curves.as_deref())?;
    let mut stems: Vec<String> = curves.iter().map(|c| file_stem(c.id())).collect();
    stems.sort();
    if let Some(w) = stems.windows(2).find(|w| w[0] == w[1]) {
        return Err(usage(format!("two curve ids map to the same file name {}.csv", w[0])));
    }

    let results: Vec<Result<ReconstructedCurve, Failure>> = curves
        .par_iter()
        .map(|curve| {
            let out = match &plan {
                Some(plan) => iterative_reconstruct(curve, &model, a.method, plan).map(|r| r.curve),
                None => model.reconstruct(curve, a.method, a.truncation),
            };
            out.map_err(|e| Failure::Compute(format!("curve {}: {e}", curve.id())))
        })
        .collect();
    let results = results.into_iter().collect::<Result<Vec<_>, _>>()?;

    create_dir(&a.out_dir)?;
    let c = Some(comment);
    for r in &results {
        write_file(&a.out_dir.join(format!("{}.csv", file_stem(&r.curve_id))), |w| r.write_csv(w, c))?;
        let missing = r.non_estimable_count();
        if missing > 0 {
            let hint = if a.iterative { "" } else { "; try --iterative" };
            eprintln!(
                "warning: curve {}: {missing} grid points are not estimable{hint}",
                r.curve_id
            );
        }
    }
    write_file(&a.out_dir.join("summary.csv"), |w| {
        writeln!(w, "# {comment}")?;
        writeln!(w, "curve_id,method,K,rho,non_estimable,flags")?;
        for r in &results {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.curve_id,
                r.method,
                r.k_used.map_or(String::new(), |k| k.to_string()),
                r.rho.map_or(String::new(), |x| x.to_string()),
                r.non_estimable_count(),
                r.flags.join(";").replace(',', " ")
            )?;
        }
        Ok(())
    })?;
    println!("reconstructed {} curves into {}", results.len(), a.out_dir.display());
    Ok(())
}

fn simulate(a: &SimulateArgs, comment: &str) -> Result<(), Failure> {
    let dgp = DgpId::from_number(a.dgp).map_err(|e| usage(e.to_string()))?;
    if !(a.amplitude > 0.0 && a.amplitude.is_finite()) {
        return Err(usage(format!("amplitude must be positive, got {}", a.amplitude)));
    }
    let mut config = DgpConfig::new(dgp, a.n, a.m, a.seed, a.reps);
    config.process = dgp.process(a.m, a.score_draw);
    config.process.amplitude = a.amplitude;
    config.n_targets = a.targets;
    config.grid_len = a.grid_len;
    config.model.h_x = a.h_x;
    config.model.h_mu = a.h_mu;
    config.model.h_gamma = a.h_gamma;
    config.validate().map_err(|e| usage(e.to_string()))?;
    let methods = a.methods.clone().unwrap_or_else(|| dgp.default_methods());
    if methods.is_empty() {
        return Err(usage("no methods given"));
    }

    let report = run_study(&config, &methods)?;
    let c = Some(comment);
    if let Some(path) = &a.out {
        write_file(path, |w| report.write_csv(w, c))?;
    }
    if let Some(path) = &a.targets_out {
        write_file(path, |w| report.write_targets_csv(w, c))?;
    }
    println!("{} n={} m={} reps={} seed={}", report.label, a.n, a.m, a.reps, a.seed);
    println!("{:<8} {:>10} {:>12} {:>12} {:>12} {:>9}", "Method", "MSE_ratio", "MSE", "Bias2", "Var", "failures");
    for r in &report.rows {
        println!(
            "{:<8} {:>10.2} {:>12.4} {:>12.4} {:>12.4} {:>9}",
            r.method.label(),
            r.mse_ratio,
            r.mse,
            r.bias2,
            r.var,
            r.failures
        );
    }
    eprintln!("runtime: {:.1}s", report.runtime_seconds);
    Ok(())
}

fn gcv_report(a: &GcvArgs, comment: &str) -> Result<(), Failure> {
    let (data, model) = load_and_fit(&a.model, false)?;
    let sub = match (&a.curve, &a.observed) {
        (Some(id), _) => {
            let curve = data.curve(id).ok_or_else(|| usage(format!("no curve with id {id:?}")))?;
            model.curve_subdomain(curve)?
        }
        (None, Some(iv)) => Subdomain::new(iv.0.clone(), model.grid()).map_err(|e| usage(e.to_string()))?,
        (None, None) => return Err(usage("give --curve or --observed")),
    };
    let table = model.gcv(a.method, &sub)?;
    let param = if a.method == Method::Kraus { "rho" } else { "K" };
    let observed: Vec<String> = sub.intervals().iter().map(|iv| format!("[{}, {}]", iv.lo, iv.hi)).collect();
    println!(
        "GCV for {} on O = {} from {} complete curves",
        a.method,
        observed.join(" u "),
        table.complete_curves
    );
    println!("{param:>12} {:>14} {:>14}", "RSS", "GCV");
    for &(p, rss, gcv) in &table.rows {
        let mark = if p == table.chosen { " *" } else { "" };
        println!("{p:>12} {rss:>14.6e} {gcv:>14.6e}{mark}");
    }
    println!("chosen {param}: {}", table.chosen);
    if let Some(path) = &a.out {
        write_file(path, |w| {
            writeln!(w, "# {comment}")?;
            writeln!(w, "{param},rss,gcv,chosen")?;
            for &(p, rss, gcv) in &table.rows {
                writeln!(w, "{p},{rss},{gcv},{}", u8::from(p == table.chosen))?;
            }
            Ok(())
        })?;
    }
    Ok(())
}
