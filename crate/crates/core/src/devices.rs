//! Resource models: DC transformer, PV/load profiles and converter envelopes.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::DeviceError;
use crate::grid::Base;

/// DC transformer parameters in SI units, as stored in the grid file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DctDef {
    pub id: String,
    pub primary: String,
    pub secondary: String,
    pub alpha_kw_per_v: f64,
    pub r_equiv_ohm: f64,
    pub p_mag_loss_kw: f64,
    pub deadband_halfwidth_v: f64,
    pub rating_kw: f64,
}

/// Which DCT behaviour to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fidelity {
    /// The controller's model: linear transfer and constant magnetizing loss.
    #[default]
    Ideal,
    /// The plant: deadband around zero voltage difference plus copper loss.
    Plant,
}

/// Resonant DC/DC converter whose transfer is proportional to the voltage
/// difference across it.
///
/// Sign convention: `transfer = α (E1 − E2)` is the power moved from the
/// primary to the secondary side, so the network injections are
/// `P1 = −transfer − loss/2` and `P2 = transfer − loss/2`. The device pulls
/// power out of its higher-voltage side.
#[derive(Debug, Clone, PartialEq)]
pub struct DctModel {
    pub def: DctDef,
    /// Unified index of the primary terminal.
    pub primary: usize,
    pub secondary: usize,
    /// p.u. power per p.u. voltage.
    pub alpha: f64,
    pub r: f64,
    pub p_mag: f64,
    pub deadband: f64,
    pub rating: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DctPower {
    /// Injection into the network at the primary terminal (p.u.).
    pub p1: f64,
    pub p2: f64,
    pub transfer: f64,
    pub loss: f64,
}

/// Partial derivatives of `(P1, P2)` with respect to `(E1, E2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DctJacobian {
    pub dp1: [f64; 2],
    pub dp2: [f64; 2],
}

impl DctModel {
    pub fn new(def: DctDef, primary: usize, secondary: usize, base: &Base) -> Self {
        let alpha = def.alpha_kw_per_v * 1e3 * base.v_dc / base.s_va;
        DctModel {
            alpha,
            r: def.r_equiv_ohm / base.z_dc(),
            p_mag: base.kw_to_pu(def.p_mag_loss_kw),
            deadband: def.deadband_halfwidth_v / base.v_dc,
            rating: base.kw_to_pu(def.rating_kw),
            primary,
            secondary,
            def,
        }
    }

    pub fn id(&self) -> &str {
        &self.def.id
    }

    /// Transfer and its derivative with respect to `x = E1 − E2`.
    ///
    /// The plant deadband scales the linear law by the smoothstep
    /// `3u² − 2u³` of `u = |x| / h`, which is C¹ and equals the linear law
    /// for `|x| ≥ h`.
    fn transfer(&self, x: f64, fidelity: Fidelity) -> (f64, f64) {
        let h = self.deadband;
        if fidelity == Fidelity::Ideal || h == 0.0 || x.abs() >= h {
            return (self.alpha * x, self.alpha);
        }
        let u = x.abs() / h;
        let s = u * u * (3.0 - 2.0 * u);
        // d(x s(|x|/h))/dx = s + u s'(u) with s'(u) = 6u(1 − u)
        let ds = s + u * 6.0 * u * (1.0 - u);
        (self.alpha * x * s, self.alpha * ds)
    }

    pub fn power(&self, e1: f64, e2: f64, fidelity: Fidelity) -> DctPower {
        let (t, _) = self.transfer(e1 - e2, fidelity);
        let loss = match fidelity {
            Fidelity::Ideal => self.p_mag,
            Fidelity::Plant => {
                let i = t / e1;
                self.p_mag + self.r * i * i
            }
        };
        DctPower {
            p1: -t - 0.5 * loss,
            p2: t - 0.5 * loss,
            transfer: t,
            loss,
        }
    }

    pub fn jacobian(&self, e1: f64, e2: f64, fidelity: Fidelity) -> DctJacobian {
        let (t, dt) = self.transfer(e1 - e2, fidelity);
        // dloss/dE1 and dloss/dE2
        let (l1, l2) = match fidelity {
            Fidelity::Ideal => (0.0, 0.0),
            Fidelity::Plant => {
                let i = t / e1;
                let di1 = dt / e1 - t / (e1 * e1);
                let di2 = -dt / e1;
                (2.0 * self.r * i * di1, 2.0 * self.r * i * di2)
            }
        };
        DctJacobian {
            dp1: [-dt - 0.5 * l1, dt - 0.5 * l2],
            dp2: [dt - 0.5 * l1, -dt - 0.5 * l2],
        }
    }
}

/// Evaluates the DCT for the given terminal voltages (p.u.).
pub fn dct_power(dct: &DctModel, e1: f64, e2: f64, fidelity: Fidelity) -> DctPower {
    dct.power(e1, e2, fidelity)
}

/// Box check of a converter operating point against its rating.
///
/// `p` and `q` are in p.u. of `base`; the set is closed.
pub fn ic_envelope(rating_kva: f64, p: f64, q: f64, base: &Base) -> bool {
    let cap = base.kw_to_pu(rating_kva);
    p.abs() <= cap && q.abs() <= cap
}

/// Time series of one resource, per-unit, generator convention.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ProfileSeries {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    /// Available (maximum power point) generation, PV only.
    pub p_mpp: Option<Vec<f64>>,
}

/// Per-step injections of every profiled resource over a fixed horizon.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ResourceProfile {
    horizon: usize,
    series: BTreeMap<String, ProfileSeries>,
}

impl ResourceProfile {
    pub fn new(horizon: usize) -> Self {
        ResourceProfile {
            horizon,
            series: BTreeMap::new(),
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn insert(&mut self, id: &str, series: ProfileSeries) -> Result<(), DeviceError> {
        let bad = |what: &str| DeviceError::InvalidProfile(alloc::format!("`{id}`: {what}"));
        if series.p.len() != self.horizon || series.q.len() != self.horizon {
            return Err(bad("series length differs from the horizon"));
        }
        if let Some(mpp) = &series.p_mpp {
            if mpp.len() != self.horizon {
                return Err(bad("MPP series length differs from the horizon"));
            }
            if mpp.iter().any(|m| !(*m >= 0.0)) {
                return Err(bad("MPP must be non-negative"));
            }
        }
        if series.p.iter().chain(&series.q).any(|v| !v.is_finite()) {
            return Err(bad("non-finite value"));
        }
        self.series.insert(id.to_string(), series);
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.series.keys().map(String::as_str)
    }

    pub fn get(&self, id: &str) -> Option<&ProfileSeries> {
        self.series.get(id)
    }

    fn check_step(&self, t: usize) -> Result<(), DeviceError> {
        if t >= self.horizon {
            return Err(DeviceError::OutOfHorizon {
                step: t,
                horizon: self.horizon,
            });
        }
        Ok(())
    }

    fn series(&self, id: &str) -> Result<&ProfileSeries, DeviceError> {
        self.series
            .get(id)
            .ok_or_else(|| DeviceError::UnknownResource(id.to_string()))
    }

    /// Active and reactive injection of a resource at step `t` (p.u.).
    pub fn pq(&self, id: &str, t: usize) -> Result<(f64, f64), DeviceError> {
        self.check_step(t)?;
        let s = self.series(id)?;
        Ok((s.p[t], s.q[t]))
    }

    /// Maximum available PV generation at step `t` (p.u.).
    pub fn pv_available(&self, id: &str, t: usize) -> Result<f64, DeviceError> {
        self.check_step(t)?;
        let s = self.series(id)?;
        s.p_mpp
            .as_ref()
            .map(|m| m[t])
            .ok_or_else(|| DeviceError::NoMpp(id.to_string()))
    }

    /// Profile restricted to steps `start..start + len`.
    pub fn window(&self, start: usize, len: usize) -> Result<Self, DeviceError> {
        if start + len > self.horizon {
            return Err(DeviceError::OutOfHorizon {
                step: start + len,
                horizon: self.horizon,
            });
        }
        let cut = |v: &Vec<f64>| v[start..start + len].to_vec();
        Ok(ResourceProfile {
            horizon: len,
            series: self
                .series
                .iter()
                .map(|(k, s)| {
                    (
                        k.clone(),
                        ProfileSeries {
                            p: cut(&s.p),
                            q: cut(&s.q),
                            p_mpp: s.p_mpp.as_ref().map(cut),
                        },
                    )
                })
                .collect(),
        })
    }
}

/// Maximum available PV generation of `id` at step `t` (p.u.).
pub fn pv_available(profile: &ResourceProfile, id: &str, t: usize) -> Result<f64, DeviceError> {
    profile.pv_available(id, t)
}
