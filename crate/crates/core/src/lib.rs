//! Numerical toolkit for gluing an anti-self-dual instanton into a smooth
//! SO(3) background connection and measuring the Yang–Mills energy change.

pub mod algebra;
pub mod forms;
pub mod instanton;
pub mod quadrature;
pub mod background;
pub mod gluing;
pub mod flow;
pub mod cli;
