//! Optical tissue parameters and piecewise media maps.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Point;

#[derive(Debug, Error, PartialEq)]
pub enum MediaError {
    #[error("invalid tissue: mu_a = {mu_a}, mu_s' = {mu_s_prime}")]
    InvalidTissue { mu_a: f64, mu_s_prime: f64 },
    #[error("unknown tissue preset {0:?}")]
    UnknownPreset(String),
    #[error("point {0:?} does not resolve to a tissue")]
    Unresolved([f64; 3]),
}

/// Absorption and reduced scattering coefficient of a tissue.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tissue {
    pub mu_a: f64,
    pub mu_s_prime: f64,
}

impl Tissue {
    pub fn new(mu_a: f64, mu_s_prime: f64) -> Result<Tissue, MediaError> {
        let t = Tissue { mu_a, mu_s_prime };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), MediaError> {
        if self.mu_a >= 0.0 && self.mu_s_prime > 0.0 && self.mu_a.is_finite() && self.mu_s_prime.is_finite() {
            Ok(())
        } else {
            Err(MediaError::InvalidTissue { mu_a: self.mu_a, mu_s_prime: self.mu_s_prime })
        }
    }

    /// Named presets: `lung`, `muscle`, `heart`.
    pub fn preset(name: &str) -> Result<Tissue, MediaError> {
        match name {
            "lung" => Ok(Tissue { mu_a: 0.023, mu_s_prime: 2.0 }),
            "muscle" => Ok(Tissue { mu_a: 0.007, mu_s_prime: 1.031 }),
            "heart" => Ok(Tissue { mu_a: 0.011, mu_s_prime: 1.096 }),
            other => Err(MediaError::UnknownPreset(other.to_string())),
        }
    }

    pub const PRESETS: [&'static str; 3] = ["lung", "muscle", "heart"];

    pub fn diffusion(&self) -> Result<f64, MediaError> {
        diffusion_coeff(self)
    }
}

/// `D = 1 / (3 (mu_a + mu_s'))`.
pub fn diffusion_coeff(t: &Tissue) -> Result<f64, MediaError> {
    let s = t.mu_a + t.mu_s_prime;
    if !(s > 0.0) || !s.is_finite() {
        return Err(MediaError::InvalidTissue { mu_a: t.mu_a, mu_s_prime: t.mu_s_prime });
    }
    Ok(1.0 / (3.0 * s))
}

/// Region selector of a media map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Region {
    /// Closed ball `|x - center| <= radius`.
    Ball { center: Vec<f64>, radius: f64 },
    /// Elements carrying this mesh region tag.
    Tag { tag: i32 },
}

impl Region {
    fn contains(&self, p: &Point, tag: Option<i32>) -> bool {
        match self {
            Region::Ball { center, radius } => {
                let c = crate::point_from_slice(center).unwrap_or_else(Point::zeros);
                (p - c).norm() <= *radius
            }
            Region::Tag { tag: t } => tag == Some(*t),
        }
    }
}

/// Piecewise constant media: the first matching region wins, otherwise the
/// background tissue applies.
#[derive(Debug, Clone, PartialEq)]
pub struct MediaMap {
    pub regions: Vec<(Region, Tissue)>,
    pub background: Tissue,
}

/// Coefficients of the diffusion equation at a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coefficients {
    pub diffusion: f64,
    pub absorption: f64,
}

impl MediaMap {
    pub fn uniform(t: Tissue) -> MediaMap {
        MediaMap { regions: Vec::new(), background: t }
    }

    pub fn validate(&self) -> Result<(), MediaError> {
        self.background.validate()?;
        self.regions.iter().try_for_each(|(_, t)| t.validate())
    }

    pub fn tissue_at(&self, p: &Point, tag: Option<i32>) -> &Tissue {
        self.regions
            .iter()
            .find(|(r, _)| r.contains(p, tag))
            .map(|(_, t)| t)
            .unwrap_or(&self.background)
    }

    /// `(D, mu)` at `p`; `tag` is the mesh region tag when evaluating on an element.
    pub fn eval(&self, p: &Point, tag: Option<i32>) -> Result<Coefficients, MediaError> {
        if !p.iter().all(|x| x.is_finite()) {
            return Err(MediaError::Unresolved([p.x, p.y, p.z]));
        }
        let t = self.tissue_at(p, tag);
        Ok(Coefficients { diffusion: diffusion_coeff(t)?, absorption: t.mu_a })
    }

    /// Radii of spherical region boundaries centred at the origin, for meshing.
    pub fn interface_radii(&self) -> Vec<f64> {
        self.regions
            .iter()
            .filter_map(|(r, _)| match r {
                Region::Ball { center, radius } if center.iter().all(|c| *c == 0.0) => Some(*radius),
                _ => None,
            })
            .collect()
    }
}

pub fn eval_media(m: &MediaMap, p: &Point) -> Result<Coefficients, MediaError> {
    m.eval(p, None)
}
