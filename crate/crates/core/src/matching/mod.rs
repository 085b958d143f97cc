//! One-to-one assignment of predictions to ground truth and the set loss.

mod cost;
mod hungarian;
mod loss;

pub use cost::{class_cost, cost_matrix, match_cost, smooth_l1_boxes, FOCAL_ALPHA, FOCAL_GAMMA, PROB_CLAMP};
pub use hungarian::{hungarian, Assignment};
pub use loss::{focal_loss, focal_term, l1_loss, riou_loss, set_loss, set_loss_with, SetLoss};
