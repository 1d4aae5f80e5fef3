use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{normalize_quat, quat_mul, quat_norm, quat_to_matrix, Pose};
use crate::scene::SceneBundle;

const UNIT_QUAT_TOL: f64 = 1e-9;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// One Gaussian primitive, stored in optimizer space: log-scale, logit
/// opacity and an unnormalized quaternion `[w, x, y, z]` that is normalized
/// on use.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian {
    pub mean: [f64; 3],
    pub log_scale: [f64; 3],
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    pub color: [f64; 3],
}

impl Gaussian {
    pub const PARAMS: usize = 14;

    /// Builds a primitive from activated values.
    pub fn new(mean: [f64; 3], scale: [f64; 3], rotation: [f64; 4], opacity: f64, color: [f64; 3]) -> Self {
        Self {
            mean,
            log_scale: scale.map(f64::ln),
            rotation,
            opacity_logit: logit(opacity),
            color,
        }
    }

    pub fn isotropic(mean: [f64; 3], scale: f64, opacity: f64, color: [f64; 3]) -> Self {
        Self::new(mean, [scale; 3], [1.0, 0.0, 0.0, 0.0], opacity, color)
    }

    pub fn scale(&self) -> [f64; 3] {
        self.log_scale.map(f64::exp)
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn unit_rotation(&self) -> [f64; 4] {
        normalize_quat(self.rotation)
    }

    pub fn mean_vec(&self) -> Vector3<f64> {
        Vector3::from(self.mean)
    }

    /// World covariance `R diag(s)^2 R^T`.
    pub fn covariance(&self) -> Matrix3<f64> {
        covariance_unchecked(self.scale(), self.unit_rotation())
    }

    pub fn to_array(&self) -> [f64; Self::PARAMS] {
        let mut out = [0.0; Self::PARAMS];
        out[0..3].copy_from_slice(&self.mean);
        out[3..6].copy_from_slice(&self.log_scale);
        out[6..10].copy_from_slice(&self.rotation);
        out[10] = self.opacity_logit;
        out[11..14].copy_from_slice(&self.color);
        out
    }

    pub fn from_array(a: &[f64; Self::PARAMS]) -> Self {
        Self {
            mean: [a[0], a[1], a[2]],
            log_scale: [a[3], a[4], a[5]],
            rotation: [a[6], a[7], a[8], a[9]],
            opacity_logit: a[10],
            color: [a[11], a[12], a[13]],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

fn covariance_unchecked(s: [f64; 3], r: [f64; 4]) -> Matrix3<f64> {
    let m = quat_to_matrix(r) * Matrix3::from_diagonal(&Vector3::from(s));
    let cov = m * m.transpose();
    // Exact symmetry regardless of rounding in the product.
    (cov + cov.transpose()) * 0.5
}

/// Covariance from a positive scale vector and a unit quaternion.
pub fn covariance(s: [f64; 3], r: [f64; 4]) -> Result<Matrix3<f64>> {
    if (quat_norm(r) - 1.0).abs() > UNIT_QUAT_TOL {
        return Err(Error::Argument(format!(
            "rotation quaternion must be unit length, |r| = {}",
            quat_norm(r)
        )));
    }
    if s.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Argument(format!("scales must be positive: {s:?}")));
    }
    Ok(covariance_unchecked(s, r))
}

/// Places box-local primitives in the world: `mu' = R mu + t`, and the
/// primitive rotation is pre-multiplied by the pose rotation.
pub fn compose_actor(actor: &[Gaussian], pose: &Pose) -> Vec<Gaussian> {
    let q_pose = pose.rotation_quat();
    actor
        .iter()
        .map(|g| Gaussian {
            mean: pose.transform_point(&g.mean_vec()).into(),
            rotation: quat_mul(q_pose, g.rotation),
            ..*g
        })
        .collect()
}

/// Where a composed primitive came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Background(usize),
    Actor { actor: usize, index: usize },
}

/// Background in world coordinates plus per-actor box-local primitives.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GaussianScene {
    pub background: Vec<Gaussian>,
    pub actors: Vec<Vec<Gaussian>>,
    /// `actor_poses[actor][frame]`, `None` where the actor is not annotated.
    pub actor_poses: Vec<Vec<Option<Pose>>>,
}

impl GaussianScene {
    pub fn len(&self) -> usize {
        self.background.len() + self.actors.iter().map(Vec::len).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Actor poses taken from the bundle's box annotations.
    pub fn poses_from_bundle(bundle: &SceneBundle) -> Vec<Vec<Option<Pose>>> {
        let mut poses = vec![vec![None; bundle.frame_count()]; bundle.actor_count];
        for b in &bundle.boxes {
            poses[b.actor_id][b.frame_index] = Some(b.pose);
        }
        poses
    }

    pub fn validate(&self, actor_count: usize) -> Result<()> {
        if self.actors.len() != actor_count || self.actor_poses.len() != actor_count {
            return Err(Error::validation(
                "scene.actors",
                format!(
                    "{} actor sets and {} pose tracks for {} actors",
                    self.actors.len(),
                    self.actor_poses.len(),
                    actor_count
                ),
            ));
        }
        Ok(())
    }

    /// World-frame primitives at `frame`, with their origins.
    pub fn composed(&self, frame: usize) -> (Vec<Gaussian>, Vec<Origin>) {
        let mut gs = self.background.clone();
        let mut origin: Vec<Origin> = (0..gs.len()).map(Origin::Background).collect();
        for (a, actor) in self.actors.iter().enumerate() {
            let Some(Some(pose)) = self.actor_poses.get(a).and_then(|p| p.get(frame)) else {
                continue;
            };
            gs.extend(compose_actor(actor, pose));
            origin.extend((0..actor.len()).map(|index| Origin::Actor { actor: a, index }));
        }
        (gs, origin)
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&mut Gaussian)) {
        self.background.iter_mut().for_each(&mut f);
        for a in &mut self.actors {
            a.iter_mut().for_each(&mut f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_gaussian(rng: &mut ChaCha8Rng) -> Gaussian {
        Gaussian {
            mean: [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)],
            log_scale: [rng.random_range(-2.0..0.5), rng.random_range(-2.0..0.5), rng.random_range(-2.0..0.5)],
            rotation: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.5],
            opacity_logit: rng.random_range(-2.0..2.0),
            color: [rng.random(), rng.random(), rng.random()],
        }
    }

    #[test]
    fn identity_covariances() {
        let id = [1.0, 0.0, 0.0, 0.0];
        assert_eq!(covariance([1.0; 3], id).unwrap(), Matrix3::identity());
        assert_eq!(
            covariance([2.0, 1.0, 1.0], id).unwrap(),
            Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0))
        );
    }

    #[test]
    fn non_unit_quaternion_is_rejected() {
        assert!(covariance([1.0; 3], [2.0, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn covariance_eigenvalues_are_squared_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let s = [rng.random_range(0.1..3.0), rng.random_range(0.1..3.0), rng.random_range(0.1..3.0)];
            let r = normalize_quat([rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
            let cov = covariance(s, r).unwrap();
            assert!((cov - cov.transpose()).abs().max() <= 1e-12);
            let mut eig: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().copied().collect();
            let mut want: Vec<f64> = s.iter().map(|v| v * v).collect();
            eig.sort_by(f64::total_cmp);
            want.sort_by(f64::total_cmp);
            for (a, b) in eig.iter().zip(&want) {
                assert!((a - b).abs() <= 1e-9, "{eig:?} vs {want:?}");
            }
        }
    }

    #[test]
    fn compose_translation_only() {
        let g = Gaussian::isotropic([0.0; 3], 0.5, 0.5, [0.2; 3]);
        let pose = Pose::new(Matrix3::identity(), Vector3::new(1.0, 2.0, 3.0)).unwrap();
        let out = compose_actor(&[g], &pose);
        assert_eq!(out[0].mean, [1.0, 2.0, 3.0]);
        assert_eq!(compose_actor(&[g], &Pose::identity())[0], g);
    }

    #[test]
    fn compose_conjugates_covariance_and_inverts() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..50 {
            let g = random_gaussian(&mut rng);
            let pose = Pose::from_quaternion(
                [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.3],
                Vector3::new(rng.random_range(-9.0..9.0), rng.random_range(-9.0..9.0), 1.0),
            );
            let w = compose_actor(&[g], &pose)[0];
            let expect = pose.rotation * g.covariance() * pose.rotation.transpose();
            assert!((w.covariance() - expect).abs().max() <= 1e-9);
            assert_eq!((w.log_scale, w.opacity_logit, w.color), (g.log_scale, g.opacity_logit, g.color));
            let back = compose_actor(&[w], &pose.inverse())[0];
            for i in 0..3 {
                assert!((back.mean[i] - g.mean[i]).abs() <= 1e-9);
            }
            assert!((back.covariance() - g.covariance()).abs().max() <= 1e-9);
        }
    }
}
