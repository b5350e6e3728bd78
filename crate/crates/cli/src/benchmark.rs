//! `benchmark`: wall time of quadruped rollouts with and without the
//! backward pass, over batch sizes, controller sizes and worker counts.

use std::fs;
use std::io::{BufWriter, Write};
use std::time::Instant;

use diffdyn::optimize::{evaluate, Problem, RolloutOptions, Workers};
use diffdyn::scenarios::{scenario, ControlTask, Task};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{default_workers, BenchmarkArgs, CliError, CliResult, Exit};

pub const BENCHMARK_HEADER: &str = "batch,params,workers,fwd_s,fwd_bwd_s,ratio";

#[derive(Clone, Debug, PartialEq)]
pub struct Timing {
    pub batch: usize,
    pub params: usize,
    pub workers: usize,
    pub fwd_s: f64,
    pub fwd_bwd_s: f64,
    /// Simulated seconds per rollout.
    pub duration: f64,
}

impl Timing {
    pub fn ratio(&self) -> f64 {
        self.fwd_bwd_s / self.fwd_s
    }

    /// Simulated robot-seconds per wall-clock day, forward only.
    pub fn model_seconds_per_day(&self) -> f64 {
        self.duration * self.batch as f64 / self.fwd_s * 86_400.0
    }
}

/// The quadruped gait task with a two-layer controller of `width` units
/// per layer.
pub fn quadruped_task(batch: usize, width: usize, duration: f64) -> CliResult<ControlTask> {
    let mut scene = scenario("quadruped-gait")?;
    if let Some(Task::Gait {
        duration: d,
        batch: b,
        hidden,
        ..
    }) = scene.task.as_mut()
    {
        *d = duration;
        *b = batch;
        *hidden = vec![width, width];
    }
    scene.validate().map_err(|e| CliError::usage(e.to_string()))?;
    Ok(ControlTask::new(&scene)?)
}

pub fn time_rollouts(task: &ControlTask, workers: usize, seed: u64, duration: f64) -> CliResult<Timing> {
    let pool = Workers::new(workers);
    let params = task.initial_params(seed);
    let episode = task.sample_episode(&mut ChaCha8Rng::seed_from_u64(seed));
    let time = |gradient| -> CliResult<f64> {
        let start = Instant::now();
        evaluate::<f64, _>(task, &params, &episode, RolloutOptions { alpha: 0.99, gradient }, &pool)?;
        Ok(start.elapsed().as_secs_f64())
    };
    let fwd_s = time(false)?;
    let fwd_bwd_s = time(true)?;
    Ok(Timing {
        batch: task.batch,
        params: params.len(),
        workers,
        fwd_s,
        fwd_bwd_s,
        duration,
    })
}

pub fn run(args: &BenchmarkArgs, out: &mut dyn Write, log: &mut dyn Write) -> CliResult<Exit> {
    let workers = if args.workers.is_empty() {
        vec![default_workers()?]
    } else {
        args.workers.clone()
    };
    if workers.contains(&0) || args.batch.contains(&0) || args.widths.contains(&0) {
        return Err(CliError::usage(
            "batch sizes, widths and worker counts must be positive",
        ));
    }
    let mut rows = Vec::new();
    for &width in &args.widths {
        for &batch in &args.batch {
            let task = quadruped_task(batch, width, args.duration)?;
            if task.steps == 0 {
                return Err(CliError::usage("--duration must cover at least one step"));
            }
            for &w in &workers {
                let t = time_rollouts(&task, w, args.seed, args.duration)?;
                writeln!(
                    log,
                    "batch {} params {} workers {}: forward {:.3} s, forward+backward {:.3} s, ratio {:.2}, {:.0} model-seconds/day",
                    t.batch,
                    t.params,
                    t.workers,
                    t.fwd_s,
                    t.fwd_bwd_s,
                    t.ratio(),
                    t.model_seconds_per_day()
                )?;
                rows.push(t);
            }
        }
    }
    match &args.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let mut w = BufWriter::new(fs::File::create(dir.join("benchmark.csv"))?);
            write_timings(&rows, &mut w)?;
            w.flush()?;
        }
        None => write_timings(&rows, out)?,
    }
    Ok(Exit::Success)
}

pub fn write_timings(rows: &[Timing], w: &mut dyn Write) -> std::io::Result<()> {
    writeln!(w, "{BENCHMARK_HEADER}")?;
    for t in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            t.batch,
            t.params,
            t.workers,
            t.fwd_s,
            t.fwd_bwd_s,
            t.ratio()
        )?;
    }
    Ok(())
}
