//! Dynamic Gaussian scene: primitives, actor composition, projection and
//! the differentiable tiled renderer.

pub mod gaussian;
pub mod io;
pub mod project;
pub mod render;

pub use gaussian::{compose_actor, covariance, Gaussian, GaussianScene, Origin};
pub use io::{load_scene, read_scene, save_scene, write_scene};
pub use project::{project, Projected, LOW_PASS, NEAR_PLANE};
pub use render::{
    render, render_backward, render_gaussians, render_with_backward, GaussianGrad, RenderOptions,
    RenderOutput, RenderPass, SceneGradients,
};
