//! Exponential moving average of the trainable weights.

use crate::error::{Error, Result};
use crate::networks::params::ParamStore;

#[derive(Clone, Debug)]
pub struct Ema {
    decay: f64,
    warmup: bool,
    updates: u64,
    shadow: ParamStore,
}

impl Ema {
    /// Shadow starts as a copy of `live`. With `warmup`, update `n` (from 0)
    /// uses `min(decay, (1 + n) / (10 + n))`.
    pub fn new(live: &ParamStore, decay: f64, warmup: bool) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::InvalidArgument(format!("ema decay must lie in [0, 1), got {decay}")));
        }
        Ok(Self {
            decay,
            warmup,
            updates: 0,
            shadow: live.clone(),
        })
    }

    /// Resume with a stored shadow.
    pub fn from_state(shadow: ParamStore, decay: f64, warmup: bool, updates: u64) -> Result<Self> {
        let mut ema = Self::new(&shadow, decay, warmup)?;
        ema.updates = updates;
        Ok(ema)
    }

    pub fn shadow(&self) -> &ParamStore {
        &self.shadow
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Decay the next update will use.
    pub fn current_decay(&self) -> f64 {
        if self.warmup {
            let n = self.updates as f64;
            self.decay.min((1.0 + n) / (10.0 + n))
        } else {
            self.decay
        }
    }

    /// `shadow ← shadow + (1 − d)·(live − shadow)`.
    pub fn update(&mut self, live: &ParamStore) -> Result<()> {
        if !self.shadow.same_layout(live) {
            return Err(Error::InvalidArgument("ema shadow and live parameters differ in layout".into()));
        }
        let d = self.current_decay();
        for (s, l) in self.shadow.tensors_mut().iter_mut().zip(live.tensors()) {
            if d == 0.0 {
                *s = l.clone();
                continue;
            }
            for (s, &l) in s.data_mut().iter_mut().zip(l.data()) {
                *s += (1.0 - d) * (l - *s);
            }
        }
        self.updates += 1;
        Ok(())
    }
}
