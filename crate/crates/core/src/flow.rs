//! Linear flow-matching path, classifier-free guidance and the Euler sampler.
//!
//! Path convention: `z_t = (1 − t) F + t ε`, so `t = 0` is clean data, `t = 1`
//! is pure noise and the velocity target is `ε − F`. Sampling integrates from
//! `t = 1` down to `t = 0`.

use alloc::vec::Vec;

use crate::{Error, Result};

pub const DEFAULT_CFG_SCALE: f32 = 1.5;

#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub z_t: Vec<f32>,
    pub t: f32,
    pub target_u: Vec<f32>,
}

pub fn flow_interpolate(clean: &[f32], noise: &[f32], t: f32) -> Result<FlowState> {
    if clean.len() != noise.len() {
        return Err(Error::ShapeMismatch {
            expected: clean.len(),
            actual: noise.len(),
        });
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(alloc::format!("flow time {t} outside [0, 1]")));
    }
    let z_t = clean
        .iter()
        .zip(noise)
        .map(|(f, e)| (1.0 - t) * f + t * e)
        .collect();
    let target_u = clean.iter().zip(noise).map(|(f, e)| e - f).collect();
    Ok(FlowState { z_t, t, target_u })
}

/// `v_uncond + s (v_cond − v_uncond)`, evaluated as `(1 − s) v_uncond + s v_cond`
/// so that `s = 0` and `s = 1` return each input exactly.
pub fn cfg_velocity(cond: &[f32], uncond: &[f32], scale: f32) -> Result<Vec<f32>> {
    if cond.len() != uncond.len() {
        return Err(Error::ShapeMismatch {
            expected: cond.len(),
            actual: uncond.len(),
        });
    }
    Ok(cond
        .iter()
        .zip(uncond)
        .map(|(c, u)| (1.0 - scale) * u + scale * c)
        .collect())
}

/// Time grid `1 = t_0 > t_1 > … > t_n = 0` with uniform steps.
pub fn time_grid(n_steps: usize) -> Vec<f32> {
    (0..=n_steps)
        .map(|k| 1.0 - k as f32 / n_steps as f32)
        .collect()
}

/// Integrates `dz/dt = u(z, t)` from `t = 1` to `t = 0` with uniform Euler
/// steps, starting at `init`.
pub fn euler_sample<E, F>(init: Vec<f32>, n_steps: usize, mut velocity: F) -> core::result::Result<Vec<f32>, E>
where
    F: FnMut(&[f32], f32) -> core::result::Result<Vec<f32>, E>,
    E: From<Error>,
{
    if n_steps == 0 {
        return Err(Error::InvalidArgument("sampler needs at least one step".into()).into());
    }
    let grid = time_grid(n_steps);
    let mut z = init;
    for w in grid.windows(2) {
        let (t, t_next) = (w[0], w[1]);
        let u = velocity(&z, t)?;
        if u.len() != z.len() {
            return Err(Error::ShapeMismatch {
                expected: z.len(),
                actual: u.len(),
            }
            .into());
        }
        let dt = t - t_next;
        for (zi, ui) in z.iter_mut().zip(&u) {
            *zi -= dt * ui;
        }
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn endpoints_and_arithmetic() {
        let f = vec![0.5, -1.0];
        let e = vec![2.0, 3.0];
        let s0 = flow_interpolate(&f, &e, 0.0).unwrap();
        assert_eq!(s0.z_t, f);
        assert_eq!(s0.target_u, vec![1.5, 4.0]);
        let s1 = flow_interpolate(&f, &e, 1.0).unwrap();
        assert_eq!(s1.z_t, e);
        let s = flow_interpolate(&[0.0], &[2.0], 0.5).unwrap();
        assert_eq!(s.z_t, vec![1.0]);
        assert_eq!(s.target_u, vec![2.0]);
        assert!(flow_interpolate(&[0.0], &[1.0, 2.0], 0.5).is_err());
        assert!(flow_interpolate(&[0.0], &[1.0], 1.5).is_err());
    }

    #[test]
    fn cfg_identities() {
        let c = vec![1.0, 2.0];
        let u = vec![-1.0, 0.5];
        assert_eq!(cfg_velocity(&c, &u, 1.0).unwrap(), c);
        assert_eq!(cfg_velocity(&c, &u, 0.0).unwrap(), u);
        assert_eq!(DEFAULT_CFG_SCALE, 1.5);
    }

    #[test]
    fn zero_velocity_keeps_noise() {
        let init = vec![0.3, -0.7, 1.1];
        let out: Vec<f32> =
            euler_sample::<Error, _>(init.clone(), 10, |z, _| Ok(vec![0.0; z.len()])).unwrap();
        assert_eq!(out, init);
    }
}
