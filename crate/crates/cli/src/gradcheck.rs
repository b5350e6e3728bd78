//! `gradcheck`: tape gradients against central differences.

use std::fs;
use std::io::{BufWriter, Write};

use diffdyn::scenarios::{gradcheck_report, GradcheckKind, GradcheckReport};

use crate::{CliError, CliResult, Exit, GradcheckArgs};

pub const GRADCHECK_HEADER: &str = "kind,steps,samples,redrawn,group,max_rel_error,tolerance,passed";

/// Longest rollout whose finite differences stay meaningful.
pub const MAX_STEPS: usize = 50;

pub fn kinds(name: &str) -> CliResult<Vec<GradcheckKind>> {
    if name == "all" {
        return Ok(GradcheckKind::ALL.to_vec());
    }
    name.parse::<GradcheckKind>()
        .map(|k| vec![k])
        .map_err(|e| CliError::usage(format!("--kind: {e}")))
}

pub fn run(args: &GradcheckArgs, out: &mut dyn Write, log: &mut dyn Write) -> CliResult<Exit> {
    let kinds = kinds(&args.kind)?;
    if let Some(s) = args.steps {
        if s == 0 || s > MAX_STEPS {
            return Err(CliError::usage(format!("--steps must be in 1..={MAX_STEPS}, got {s}")));
        }
    }
    let mut reports = Vec::new();
    for kind in kinds {
        let steps = args.steps.unwrap_or(kind.default_steps());
        let r = gradcheck_report(kind, steps, args.samples, args.seed)?;
        writeln!(
            log,
            "{kind}: {} samples of {steps} steps, {} redrawn, max relative error {:e} (tolerance {:e}) {}",
            r.samples,
            r.redrawn,
            r.max_rel_error(),
            r.tolerance,
            if r.passed() { "ok" } else { "FAILED" }
        )?;
        reports.push(r);
    }
    match &args.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let mut w = BufWriter::new(fs::File::create(dir.join("gradcheck.csv"))?);
            write_reports(&reports, &mut w)?;
            w.flush()?;
        }
        None => write_reports(&reports, out)?,
    }
    Ok(if reports.iter().all(GradcheckReport::passed) {
        Exit::Success
    } else {
        Exit::NumericalFailure
    })
}

/// One row per parameter group; a run without samples has no groups.
pub fn write_reports(reports: &[GradcheckReport], w: &mut dyn Write) -> std::io::Result<()> {
    writeln!(w, "{GRADCHECK_HEADER}")?;
    for r in reports.iter().filter(|r| r.samples > 0) {
        for g in &r.groups {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                r.kind,
                r.steps,
                r.samples,
                r.redrawn,
                g.group,
                g.max_rel_error,
                r.tolerance,
                g.max_rel_error < r.tolerance
            )?;
        }
    }
    Ok(())
}
