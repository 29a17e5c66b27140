//! Versioned material-constants table.
//!
//! The built-in table lives in `data/materials.toml`; user tables use the same
//! format and can be loaded with [`MaterialTable::from_toml_str`].

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::magnet::Magnet;

pub const MATERIALS_FORMAT_VERSION: u32 = 1;

const BUILTIN: &str = include_str!("../data/materials.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Material {
    pub name: String,
    pub m_sat_apm: f64,
    pub spin_j: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tc_k: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub composition_anchors: Option<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialTable {
    pub format_version: u32,
    #[serde(rename = "material")]
    pub materials: Vec<Material>,
}

impl MaterialTable {
    pub fn builtin() -> Self {
        Self::from_toml_str(BUILTIN).expect("built-in materials table is valid")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: Self = toml::from_str(text).map_err(|e| Error::Materials(e.to_string()))?;
        if table.format_version != MATERIALS_FORMAT_VERSION {
            return Err(Error::Materials(format!(
                "unsupported format_version {} (expected {MATERIALS_FORMAT_VERSION})",
                table.format_version
            )));
        }
        for m in &table.materials {
            m.check()?;
        }
        Ok(table)
    }

    pub fn get(&self, name: &str) -> Result<&Material> {
        self.materials
            .iter()
            .find(|m| m.name == name)
            .ok_or_else(|| Error::Materials(format!("unknown material `{name}`")))
    }
}

impl Material {
    fn check(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Materials(format!("{}: {msg}", self.name)));
        if !(self.m_sat_apm > 0.0) || !(self.spin_j > 0.0) {
            return bad("m_sat_apm and spin_j must be positive".into());
        }
        match (&self.tc_k, &self.composition_anchors) {
            (Some(tc), None) if *tc > 0.0 => Ok(()),
            (None, Some(a)) if a.len() >= 2 && a.windows(2).all(|w| w[1][0] > w[0][0]) => Ok(()),
            _ => bad("needs exactly one of a positive tc_k or >= 2 ascending composition_anchors".into()),
        }
    }

    pub fn is_composition_tuned(&self) -> bool {
        self.composition_anchors.is_some()
    }

    /// Curie temperature, interpolated from the anchors for alloys.
    pub fn curie_temperature(&self, x: Option<f64>) -> Result<f64> {
        match (&self.composition_anchors, self.tc_k, x) {
            (Some(anchors), _, Some(x)) => {
                if !(0.0..=1.0).contains(&x) {
                    return Err(Error::Domain(format!("composition must lie in [0, 1], got {x}")));
                }
                let first = anchors[0];
                let last = anchors[anchors.len() - 1];
                if x <= first[0] {
                    return Ok(first[1]);
                }
                if x >= last[0] {
                    return Ok(last[1]);
                }
                let seg = anchors.windows(2).find(|w| x <= w[1][0]).expect("x inside anchors");
                let f = (x - seg[0][0]) / (seg[1][0] - seg[0][0]);
                Ok(seg[0][1] + f * (seg[1][1] - seg[0][1]))
            }
            (Some(_), _, None) => Err(Error::Materials(format!("{} requires a composition", self.name))),
            (None, Some(tc), None) => Ok(tc),
            (None, _, Some(_)) => Err(Error::Materials(format!("{} has a fixed composition", self.name))),
            (None, None, None) => unreachable!("checked on load"),
        }
    }

    /// Saturation magnetization, scaled by the Ni fraction for alloys.
    pub fn m_sat(&self, x: Option<f64>) -> f64 {
        match (self.is_composition_tuned(), x) {
            (true, Some(x)) => self.m_sat_apm * x,
            _ => self.m_sat_apm,
        }
    }

    /// Builds a spherical particle of this material.
    pub fn magnet(&self, x: Option<f64>, radius: f64, center: Vector3<f64>, easy_axis: Vector3<f64>) -> Result<Magnet> {
        let tc = self.curie_temperature(x)?;
        let mut mag = Magnet::new(tc, self.m_sat(x), self.spin_j, radius, center, easy_axis)?;
        if self.is_composition_tuned() {
            mag.composition_x = x;
        }
        Ok(mag)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::magnet::curie_temperature;

    #[test]
    fn builtin_table_loads() {
        let t = MaterialTable::builtin();
        assert_eq!(t.format_version, 1);
        assert_eq!(t.get("gd").unwrap().tc_k, Some(292.0));
        assert!(t.get("unobtainium").is_err());
    }

    #[test]
    fn cuni_anchors_match_the_closed_form() {
        let cuni = MaterialTable::builtin().get("cuni").unwrap().clone();
        for x in [0.5, 0.6, 0.7, 0.74, 0.9, 1.0] {
            let a = cuni.curie_temperature(Some(x)).unwrap();
            let b = curie_temperature(x).unwrap();
            assert!((a - b).abs() < 1e-9, "{x}: {a} vs {b}");
        }
        assert!((cuni.m_sat(Some(0.7)) - 3.57e5).abs() < 1e-6);
        let mag = cuni.magnet(Some(0.7), 100e-9, Vector3::zeros(), Vector3::z()).unwrap();
        assert_eq!(mag.composition_x, Some(0.7));
        assert!(mag.validate().is_ok());
        assert!(cuni.curie_temperature(None).is_err());
    }

    #[test]
    fn rejects_bad_tables() {
        let unknown_key =
            "format_version = 1\n[[material]]\nname='a'\nm_sat_apm=1.0\nspin_j=0.5\ntc_k=1.0\ncolour='red'\n";
        assert!(MaterialTable::from_toml_str(unknown_key).is_err());
        let both = "format_version = 1\n[[material]]\nname='a'\nm_sat_apm=1.0\nspin_j=0.5\ntc_k=1.0\ncomposition_anchors=[[0.0,0.0],[1.0,1.0]]\n";
        assert!(MaterialTable::from_toml_str(both).is_err());
        let version = "format_version = 9\nmaterial = []\n";
        assert!(MaterialTable::from_toml_str(version).is_err());
    }
}
