//! LBH estimators wired into the running loop, with optional self-tuning.

use serde::{Deserialize, Serialize};

use crate::control::{adapt_gains, DcGainRatio, GainAdapter, GapModulation, LbhEstimate, PiGains};
use crate::error::Result;
use crate::sim::{Excitation, Microscope, Sample, Supervisor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LbhRecord {
    pub t: f64,
    pub x: f64,
    pub estimate: f64,
    pub valid: bool,
    pub ki: f64,
}

/// Injects a sine on the error signal and tracks `|Y₂/Y₁|` between the
/// HVA input and the log current. With an adapter attached it rescales
/// `k_i` so the loop gain stays at its nominal value.
#[derive(Clone, Debug)]
pub struct DcGainTracker {
    est: DcGainRatio,
    adapter: Option<GainAdapter>,
    record_every: usize,
    n: usize,
    pub history: Vec<LbhRecord>,
}

impl DcGainTracker {
    pub fn new(est: DcGainRatio) -> Self {
        Self {
            est,
            adapter: None,
            record_every: 100,
            n: 0,
            history: Vec::new(),
        }
    }

    pub fn with_adapter(mut self, adapter: GainAdapter) -> Self {
        self.adapter = Some(adapter);
        self
    }

    /// Keep one history record every `n` samples.
    pub fn record_every(mut self, n: usize) -> Self {
        self.record_every = n.max(1);
        self
    }

    pub fn estimate(&self) -> LbhEstimate {
        self.est.estimate()
    }

    /// Gains the adapter would apply for the current estimate.
    pub fn proposed_gains(&self) -> Option<PiGains> {
        let a = self.adapter.as_ref()?;
        Some(adapt_gains(a.nominal, &self.est.estimate(), a.desired))
    }
}

impl Supervisor for DcGainTracker {
    fn excite(&mut self, t: f64) -> Excitation {
        Excitation {
            error: self.est.excitation(t),
            ..Default::default()
        }
    }

    fn observe(&mut self, s: &Sample, mic: &mut Microscope) -> Result<()> {
        self.est.observe(s.t, s.u_total, s.log_signal);
        let e = self.est.estimate();
        if let Some(a) = self.adapter.as_mut() {
            if let Some(g) = a.update(s.t, &e) {
                mic.set_gains(g)?;
            }
        }
        if self.n % self.record_every == 0 {
            self.history.push(LbhRecord {
                t: s.t,
                x: s.x,
                estimate: e.value,
                valid: e.valid,
                ki: mic.controller().gains().ki,
            });
        }
        self.n += 1;
        Ok(())
    }
}

/// Adds a dither to the actuator and reads the ripple it causes on `ln I`.
#[derive(Clone, Debug)]
pub struct GapDitherTracker {
    est: GapModulation,
}

impl GapDitherTracker {
    pub fn new(est: GapModulation) -> Self {
        Self { est }
    }

    pub fn estimate(&self) -> LbhEstimate {
        self.est.estimate()
    }
}

impl Supervisor for GapDitherTracker {
    fn excite(&mut self, t: f64) -> Excitation {
        Excitation {
            control: self.est.dither(t),
            ..Default::default()
        }
    }

    fn observe(&mut self, s: &Sample, _mic: &mut Microscope) -> Result<()> {
        self.est.observe(s.t, s.log_signal);
        Ok(())
    }
}
