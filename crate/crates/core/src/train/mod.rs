//! Objectives, optimizer, expansion trigger and the per-session loop.

mod loss;
mod optim;
mod session;
mod trigger;

pub use loss::{
    add_penalty_grad, cross_entropy, cross_entropy_logit_grad, group_lasso_sum, group_norm,
    loss_eq1, loss_eq2, one_hot, penalty, LossConfig, Objective,
};
pub use optim::{adam_step, optimizer_step, OptimState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use session::{
    accuracy, argmax, evaluate, train_session, ExpansionConfig, ExpansionEvent, Precision,
    SessionReport, Stage, TrainConfig,
};
pub use trigger::{should_expand, TriggerConfig};
