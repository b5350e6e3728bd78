//! Branch-free sphere contact detection.
//!
//! Every candidate pair is evaluated every step; whether it is touching is
//! carried by a constant 0/1 mask rather than by control flow, so the tape
//! topology is the same from step to step.

use crate::dynamics::BodyVars;
use crate::model::{Candidate, CompiledModel};
use crate::tape::{Cmp, Real, Tape, TraceError, Var};

type Res<T = Var> = Result<T, TraceError>;

/// Distance below which two sphere centers count as coincident.
pub const COINCIDENT: f64 = 1e-9;

/// A candidate contact. `a` is `None` for the ground plane; the normal
/// points from `a` to `b`, so impulses along it push `b` away from `a`.
#[derive(Clone, Debug)]
pub struct Contact {
    pub candidate: Candidate,
    pub a: Option<usize>,
    pub b: usize,
    /// `[B,3]` world contact point.
    pub point: Var,
    /// `[B,3]` unit normal.
    pub normal: Var,
    /// `[B,1]` penetration depth, positive when overlapping.
    pub depth: Var,
    /// `[B,1]` constant, 1 exactly where `depth > 0`.
    pub mask: Var,
    /// Contact point relative to each body's center of mass.
    pub lever_a: Option<Var>,
    pub lever_b: Var,
    pub friction: f64,
    pub restitution: f64,
}

/// World centers of every sphere of every body, `centers[body][sphere]`,
/// together with the rotated offsets.
pub(crate) fn sphere_centers<T: Real>(
    tape: &mut Tape<T>,
    model: &CompiledModel,
    bodies: &[BodyVars],
) -> Res<Vec<Vec<(Var, Var)>>> {
    let mut out = Vec::with_capacity(bodies.len());
    for (def, s) in model.model.bodies.iter().zip(bodies) {
        let mut centers = Vec::with_capacity(def.spheres.len());
        for sp in &def.spheres {
            let o = tape.constant_f64(1, 3, &sp.offset);
            let ro = tape.bmv3(s.r, o, false)?;
            let c = tape.add(s.x, ro)?;
            centers.push((c, ro));
        }
        out.push(centers);
    }
    Ok(out)
}

pub fn detect_contacts<T: Real>(tape: &mut Tape<T>, model: &CompiledModel, bodies: &[BodyVars]) -> Res<Vec<Contact>> {
    let centers = sphere_centers(tape, model, bodies)?;
    let batch = tape.shape(bodies[0].x).rows;
    let defs = &model.model.bodies;
    let mut out = Vec::with_capacity(model.candidates.len());
    for &cand in &model.candidates {
        let contact = match cand {
            Candidate::Ground { body, sphere } => {
                let r = defs[body].spheres[sphere].radius;
                let (c, ro) = centers[body][sphere];
                let cz = tape.col(c, 2)?;
                let neg = tape.neg(cz);
                let depth = tape.add_scalar(neg, r)?;
                let mask = tape.indicator(depth, Cmp::Gt, 0.0);
                let down = tape.constant_f64(1, 3, &[0.0, 0.0, r]);
                let point = tape.sub(c, down)?;
                let lever = tape.sub(ro, down)?;
                let normal = tape.constant_f64(batch, 3, &[0.0, 0.0, 1.0].repeat(batch));
                Contact {
                    candidate: cand,
                    a: None,
                    b: body,
                    point,
                    normal,
                    depth,
                    mask,
                    lever_a: None,
                    lever_b: lever,
                    friction: defs[body].friction,
                    restitution: defs[body].restitution,
                }
            }
            Candidate::Pair { a, sa, b, sb } => {
                let (ra, rb) = (defs[a].spheres[sa].radius, defs[b].spheres[sb].radius);
                let (ca, _) = centers[a][sa];
                let (cb, _) = centers[b][sb];
                let d = tape.sub(cb, ca)?;
                let dist = tape.l2norm(d);
                let coincident = tape.indicator(dist, Cmp::Lt, COINCIDENT);
                let safe = tape.full(1, 1, COINCIDENT);
                let denom = tape.max(dist, safe)?;
                let n = tape.div(d, denom)?;
                let up = tape.constant_f64(1, 3, &[0.0, 0.0, 1.0]);
                let normal = tape.where_mask(coincident, up, n)?;
                let neg = tape.neg(dist);
                let depth = tape.add_scalar(neg, ra + rb)?;
                let mask = tape.indicator(depth, Cmp::Gt, 0.0);
                // Midway between the two surfaces along the normal.
                let half = tape.scale(depth, 0.5)?;
                let reach = tape.neg(half);
                let reach = tape.add_scalar(reach, ra)?;
                let off = tape.mul(normal, reach)?;
                let point = tape.add(ca, off)?;
                let lever_a = tape.sub(point, bodies[a].x)?;
                let lever_b = tape.sub(point, bodies[b].x)?;
                Contact {
                    candidate: cand,
                    a: Some(a),
                    b,
                    point,
                    normal,
                    depth,
                    mask,
                    lever_a: Some(lever_a),
                    lever_b,
                    friction: (defs[a].friction * defs[b].friction).sqrt(),
                    restitution: defs[a].restitution.max(defs[b].restitution),
                }
            }
        };
        out.push(contact);
    }
    Ok(out)
}

/// Two unit tangents completing a right-handed frame with the normal. The
/// first is `normalize(e_k × n)` where `e_k` is the coordinate axis of the
/// normal's smallest component (first axis on ties).
pub fn tangent_frame<T: Real>(tape: &mut Tape<T>, n: Var) -> Res<(Var, Var)> {
    let abs = tape.abs(n);
    let (x, y, z) = (tape.col(abs, 0)?, tape.col(abs, 1)?, tape.col(abs, 2)?);
    let xy = tape.sub(x, y)?;
    let xz = tape.sub(x, z)?;
    let yz = tape.sub(y, z)?;
    let x_le_y = tape.indicator(xy, Cmp::Le, 0.0);
    let x_le_z = tape.indicator(xz, Cmp::Le, 0.0);
    let pick_x = tape.mul(x_le_y, x_le_z)?;
    let pick_y = tape.indicator(yz, Cmp::Le, 0.0);
    let ex = tape.constant_f64(1, 3, &[1.0, 0.0, 0.0]);
    let ey = tape.constant_f64(1, 3, &[0.0, 1.0, 0.0]);
    let ez = tape.constant_f64(1, 3, &[0.0, 0.0, 1.0]);
    let e_yz = tape.where_mask(pick_y, ey, ez)?;
    let e = tape.where_mask(pick_x, ex, e_yz)?;
    let raw = tape.cross3(e, n)?;
    let len = tape.l2norm(raw);
    let t1 = tape.div(raw, len)?;
    let t2 = tape.cross3(n, t1)?;
    Ok((t1, t2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::WorldState;
    use crate::model::{solid_sphere_inertia, Body, Model, Sphere, IDENTITY};

    fn sphere(name: &str, z: f64, x: f64) -> Body {
        Body {
            name: name.into(),
            mass: 1.0,
            inertia: solid_sphere_inertia(1.0, 0.5),
            spheres: vec![Sphere {
                offset: [0.0; 3],
                radius: 0.5,
            }],
            friction: 1.0,
            restitution: 0.5,
            fixed: false,
            position: [x, 0.0, z],
            rotation: IDENTITY,
            velocity: [0.0; 3],
            angular_velocity: [0.0; 3],
        }
    }

    fn contacts(bodies: Vec<Body>) -> (Tape<f64>, Vec<Contact>) {
        let model = Model {
            name: "t".into(),
            bodies,
            joints: vec![],
            motors: vec![],
            sensors: vec![],
            body_collisions: true,
        }
        .compile()
        .unwrap();
        let mut tape = Tape::new();
        let vars = WorldState::at_build_pose(&model, 1).record(&mut tape, false);
        let c = detect_contacts(&mut tape, &model, &vars).unwrap();
        (tape, c)
    }

    #[test]
    fn sphere_below_plane_level() {
        let (tape, c) = contacts(vec![sphere("a", 0.4, 0.0)]);
        assert!((tape.item(c[0].depth) - 0.1).abs() < 1e-15);
        assert_eq!(tape.value(c[0].normal), &[0.0, 0.0, 1.0]);
        assert_eq!(tape.item(c[0].mask), 1.0);
    }

    #[test]
    fn separated_sphere_is_masked() {
        let (tape, c) = contacts(vec![sphere("a", 0.6, 0.0)]);
        assert!((tape.item(c[0].depth) + 0.1).abs() < 1e-15);
        assert_eq!(tape.item(c[0].mask), 0.0);
    }

    #[test]
    fn overlapping_spheres() {
        let (tape, c) = contacts(vec![sphere("a", 2.0, 0.0), sphere("b", 2.0, 0.9)]);
        assert_eq!(c.len(), 3);
        let pair = &c[2];
        assert!((tape.item(pair.depth) - 0.1).abs() < 1e-15);
        assert_eq!(tape.item(pair.mask), 1.0);
        assert_eq!(tape.value(pair.normal), &[1.0, 0.0, 0.0]);
        let p = tape.value(pair.point);
        assert!((p[0] - 0.45).abs() < 1e-15);
    }

    #[test]
    fn coincident_centers_default_to_up() {
        let (tape, c) = contacts(vec![sphere("a", 2.0, 0.0), sphere("b", 2.0, 0.0)]);
        assert_eq!(tape.value(c[2].normal), &[0.0, 0.0, 1.0]);
        assert_eq!(tape.item(c[2].mask), 1.0);
    }

    #[test]
    fn tangents_are_orthonormal() {
        let mut tape = Tape::<f64>::new();
        let n = tape.constant_f64(3, 3, &[0.0, 0.0, 1.0, 0.6, 0.0, 0.8, 0.36, -0.48, 0.8]);
        let (t1, t2) = tangent_frame(&mut tape, n).unwrap();
        let (nv, a, b) = (tape.value(n), tape.value(t1), tape.value(t2));
        for i in 0..3 {
            let r = i * 3..i * 3 + 3;
            let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| x * y).sum::<f64>();
            assert!(dot(&nv[r.clone()], &a[r.clone()]).abs() < 1e-15);
            assert!(dot(&nv[r.clone()], &b[r.clone()]).abs() < 1e-15);
            assert!(dot(&a[r.clone()], &b[r.clone()]).abs() < 1e-15);
            assert!((dot(&a[r.clone()], &a[r.clone()]) - 1.0).abs() < 1e-15);
        }
    }
}
