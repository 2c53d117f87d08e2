use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::peu::NUM_CATEGORIES;

/// A generation persona: who is speaking and how their symptoms surface.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonaProfile {
    pub id: usize,
    pub tag: String,
    /// Relative prominence of each PEU category; non-negative, sums to 1.
    pub prominence: [f64; NUM_CATEGORIES],
    /// How openly symptoms are voiced, in [0, 1].
    pub expressiveness: f64,
    /// Tilt towards protective coping talk, in [−1, 1].
    pub coping_bias: f64,
}

impl PersonaProfile {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.prominence.iter().sum();
        if self.prominence.iter().any(|&w| w < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("persona {}: prominence must be non-negative and sum to 1", self.id)));
        }
        if !(0.0..=1.0).contains(&self.expressiveness) || !(-1.0..=1.0).contains(&self.coping_bias) {
            return Err(Error::Config(format!("persona {}: expressiveness or coping bias out of range", self.id)));
        }
        Ok(())
    }
}

fn normalized(raw: [f64; NUM_CATEGORIES]) -> [f64; NUM_CATEGORIES] {
    let s: f64 = raw.iter().sum();
    raw.map(|w| w / s)
}

// Columns: distortions, hopelessness, self-negativity, stressors,
// withdrawal, somatic, rumination, coping.
const BASE: [(&str, [f64; NUM_CATEGORIES], f64, f64); 4] = [
    ("student, early twenties", [20.0, 6.0, 16.0, 9.0, 4.0, 2.0, 12.0, 1.0], 0.35, 0.2),
    ("caregiver, mid forties", [3.0, 14.0, 2.0, 20.0, 6.0, 11.0, 8.0, 1.0], 0.5, -0.2),
    ("retiree, late sixties", [2.0, 12.0, 4.0, 3.0, 20.0, 16.0, 7.0, 1.0], 0.65, 0.4),
    ("professional, early thirties", [12.0, 4.0, 8.0, 16.0, 2.0, 6.0, 20.0, 1.0], 0.8, -0.4),
];

/// The four default profiles.
pub fn default_personas() -> Vec<PersonaProfile> {
    BASE.iter()
        .enumerate()
        .map(|(id, (tag, w, e, c))| PersonaProfile {
            id,
            tag: tag.to_string(),
            prominence: normalized(*w),
            expressiveness: *e,
            coping_bias: *c,
        })
        .collect()
}

/// Twelve profiles: each default profile in three expressiveness variants
/// with slightly rotated prominence.
pub fn extended_personas() -> Vec<PersonaProfile> {
    let mut out = Vec::with_capacity(12);
    for variant in 0..3 {
        for (k, base) in default_personas().into_iter().enumerate() {
            let mut w = base.prominence;
            w[..7].rotate_left(variant);
            out.push(PersonaProfile {
                id: variant * 4 + k,
                tag: format!("{} ({})", base.tag, ["reserved", "typical", "open"][variant]),
                prominence: normalized(w),
                expressiveness: (base.expressiveness + (variant as f64 - 1.0) * 0.15).clamp(0.0, 1.0),
                coping_bias: base.coping_bias,
            });
        }
    }
    out
}

/// Replaces expressiveness with evenly spaced values of the given spread
/// centred on 0.5.
pub fn with_spread(mut personas: Vec<PersonaProfile>, spread: f64) -> Result<Vec<PersonaProfile>> {
    if !(0.0..=1.0).contains(&spread) {
        return Err(Error::Config(format!("expressiveness spread {spread} outside [0, 1]")));
    }
    let k = personas.len();
    for (i, p) in personas.iter_mut().enumerate() {
        let frac = if k == 1 { 0.5 } else { i as f64 / (k - 1) as f64 };
        p.expressiveness = 0.5 - spread / 2.0 + spread * frac;
    }
    Ok(personas)
}
