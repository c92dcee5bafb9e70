//! Fluid planning, fluid dynamics and many-server simulation for prefill and
//! decode scheduling on GPU clusters.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod fluid;
pub mod harness;
pub mod model;
pub mod planner;
pub mod policy;
pub mod scalar;
pub mod sim;

pub type Instance = model::Instance<f64>;
pub type Instance32 = model::Instance<f32>;
pub type FluidPlan = planner::FluidPlan<f64>;
pub type FluidPlan32 = planner::FluidPlan<f32>;
pub type SliSpec = planner::SliSpec<f64>;
pub type PolicyParams = planner::PolicyParams<f64>;
pub type FluidState = fluid::FluidState<f64>;
pub type FluidModel = fluid::FluidModel<f64>;
