use nalgebra::DVector;

use super::{check_step_inputs, contact_frames, contact_velocities};
use crate::error::{Error, Result};
use crate::model::{integrate_configuration, rechart_configuration, smooth_dynamics_unchecked, ModelSpec, State};
use crate::mrp;
use crate::terrain::TerrainModel;
use crate::util::{mat3, seg3, vec3};

/// Penalty-contact step: penetrating points get a normal force
/// `max(0, -k phi - b phi_dot)` and a viscous tangential force clipped to
/// the friction cone. Forces are evaluated at the start of the step, then
/// velocities and positions are updated semi-implicitly.
///
/// The tangential viscosity uses `b`, discounted as `b / (1 + h b / m)` with
/// the limb mass `m` so that it stays stable at large `h b / m`. Stability of
/// the normal spring still requires `h` well below `sqrt(m / k)`.
pub fn step_spring_damper(
    model: &ModelSpec,
    terrain: &TerrainModel,
    h: f64,
    state: &State,
    control: &DVector<f64>,
    k: f64,
    b: f64,
) -> Result<State> {
    check_step_inputs(model, h, state, control)?;
    if !(k >= 0.0) || !k.is_finite() {
        return Err(Error::invalid("k", "must be >= 0"));
    }
    if !(b >= 0.0) || !b.is_finite() {
        return Err(Error::invalid("b", "must be >= 0"));
    }
    let mut a = smooth_dynamics_unchecked(model, &state.q, &state.v, control);
    let frames = contact_frames(model, terrain, &state.q);
    let vel = contact_velocities(model, &state.q, &state.v);
    let mut c = 0;
    for (limb, lay) in model.limbs.iter().zip(model.limb_layouts()) {
        let viscous = b / (1.0 + h * b / limb.limb_mass);
        for off in &limb.contact_offsets {
            let fr = &frames[c];
            let vc = vel[c];
            c += 1;
            let phi = terrain.signed_distance(&fr.position);
            if phi >= 0.0 {
                continue;
            }
            let phi_dot = fr.normal.dot(&vc);
            let fn_ = (-k * phi - b * phi_dot).max(0.0);
            let vt = vc - fr.normal * phi_dot;
            let mut ft = -vt * viscous;
            let cap = fr.mu * fn_;
            if ft.norm() > cap {
                ft *= cap / ft.norm();
            }
            let f = fr.normal * fn_ + ft;
            for i in 0..3 {
                a[lay.q + i] += f[i] / limb.limb_mass;
            }
            if let Some(j) = &limb.inertia {
                let rot = mrp::rotation(&seg3(&state.q, lay.q + 3));
                let torque = vec3(off).cross(&(rot.transpose() * f));
                let wdot = mat3(j).try_inverse().expect("validated inertia") * torque;
                for i in 0..3 {
                    a[lay.q + 3 + i] += wdot[i];
                }
            }
        }
    }
    let v = &state.v + a * h;
    let mut q = integrate_configuration(model, &state.q, &v, h);
    rechart_configuration(model, &mut q);
    Ok(State { q, v })
}
