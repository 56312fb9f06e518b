//! RMSProp and the plateau learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::Parameters;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmsPropConfig {
    pub rho: f64,
    pub epsilon: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        Self {
            rho: 0.9,
            epsilon: 1e-7,
        }
    }
}

/// Running mean of squared gradients, one buffer per parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp {
    pub config: RmsPropConfig,
    accum: Vec<Vec<f64>>,
}

impl RmsProp {
    pub fn new(config: RmsPropConfig, params: &impl Parameters) -> Self {
        Self {
            config,
            accum: params.blocks().iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    /// `v ← ρv + (1-ρ)g²`, `θ ← θ - lr·g/(√v + ε)`.
    pub fn step(
        &mut self,
        params: &mut impl Parameters,
        grads: &impl Parameters,
        lr: f64,
    ) -> Result<()> {
        let g_blocks = grads.blocks();
        let mut p_blocks = params.blocks_mut();
        if g_blocks.len() != p_blocks.len() || p_blocks.len() != self.accum.len() {
            return Err(Error::Shape("optimizer/parameter block mismatch".into()));
        }
        if g_blocks.iter().any(|b| b.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("gradient".into()));
        }
        let RmsPropConfig { rho, epsilon } = self.config;
        for ((p, g), v) in p_blocks.iter_mut().zip(&g_blocks).zip(&mut self.accum) {
            if p.len() != g.len() || p.len() != v.len() {
                return Err(Error::Shape("parameter block length mismatch".into()));
            }
            for ((p, &g), v) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                *v = rho * *v + (1.0 - rho) * g * g;
                *p -= lr * g / (v.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauConfig {
    pub initial_lr: f64,
    pub patience: usize,
    pub factor: f64,
    pub max_reductions: usize,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            initial_lr: 1e-3,
            patience: 10,
            factor: 0.9,
            max_reductions: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleEvent {
    Improved,
    Waiting,
    Reduced,
    Stop,
}

/// Reduces the learning rate after `patience` epochs without a strictly
/// better (higher) objective, and stops once patience runs out after the
/// last allowed reduction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauSchedule {
    pub config: PlateauConfig,
    pub best: Option<f64>,
    pub since_improvement: usize,
    pub reductions: usize,
}

impl PlateauSchedule {
    pub fn new(config: PlateauConfig) -> Self {
        Self {
            config,
            best: None,
            since_improvement: 0,
            reductions: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.config.initial_lr * self.config.factor.powi(self.reductions as i32)
    }

    pub fn update(&mut self, objective: f64) -> ScheduleEvent {
        if self.best.is_none_or(|b| objective > b) {
            self.best = Some(objective);
            self.since_improvement = 0;
            return ScheduleEvent::Improved;
        }
        self.since_improvement += 1;
        if self.since_improvement < self.config.patience {
            return ScheduleEvent::Waiting;
        }
        if self.reductions >= self.config.max_reductions {
            return ScheduleEvent::Stop;
        }
        self.reductions += 1;
        self.since_improvement = 0;
        ScheduleEvent::Reduced
    }
}
