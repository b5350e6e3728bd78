//! `simulate`: per-step state traces.

use std::fs;
use std::io::{BufWriter, Write};

use diffdyn::solver::simulate;
use diffdyn::WorldState;

use crate::config::{load_scene, Overrides};
use crate::{step_count, step_time, CliError, CliResult, Exit, SimulateArgs};

pub const TRACE_HEADER: &str = "t,body_id,x,y,z,r00,r01,r02,r10,r11,r12,r20,r21,r22,vx,vy,vz,wx,wy,wz";

pub fn run(args: &SimulateArgs, out: &mut dyn Write) -> CliResult<Exit> {
    let o = Overrides {
        scene: args.scene.scene.clone(),
        scenario: args.scene.scenario.clone(),
        ..Overrides::default()
    };
    let (_, mut scene) = load_scene(&o)?;
    if let Some(dt) = args.dt {
        scene.sim.dt = dt;
        scene.validate().map_err(|e| CliError::usage(e.to_string()))?;
    }
    let steps = step_count(args.duration, scene.sim.dt)?;
    match &args.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let mut w = BufWriter::new(fs::File::create(dir.join("trace.csv"))?);
            write_trace(&scene, steps, &mut w)?;
            w.flush()?;
        }
        None => write_trace(&scene, steps, out)?,
    }
    Ok(Exit::Success)
}

/// Simulates `steps` steps of a single copy of `scene` and writes one row
/// per body and step. Servos hold the build pose.
pub fn write_trace(scene: &diffdyn::scenarios::Scene, steps: usize, w: &mut dyn Write) -> CliResult<()> {
    let model = scene.model().compile().map_err(|e| CliError::usage(e.to_string()))?;
    let cfg = &scene.sim;
    let hold = vec![0.0; model.motor_count()];
    let hold = (!hold.is_empty()).then_some(hold.as_slice());
    writeln!(w, "{TRACE_HEADER}")?;
    let mut io_err = None;
    let mut row = String::new();
    simulate(
        &model,
        cfg,
        &WorldState::at_build_pose(&model, 1),
        steps,
        hold,
        |n, state| {
            if io_err.is_some() {
                return;
            }
            let t = step_time(n, cfg.dt);
            for body in 0..model.body_count() {
                let s = state.body(body, 0);
                row.clear();
                row.push_str(&format!("{t},{body}"));
                for v in s.x.iter().chain(&s.r).chain(&s.v).chain(&s.w) {
                    row.push_str(&format!(",{v}"));
                }
                if let Err(e) = writeln!(w, "{row}") {
                    io_err = Some(e);
                    return;
                }
            }
        },
    )?;
    match io_err {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}
