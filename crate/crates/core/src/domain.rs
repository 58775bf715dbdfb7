//! Shared domain types: materials, scenarios, garments, spectral cubes and
//! classifier profiles.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::RandomStream;

pub const CLASS_COUNT: usize = 5;

/// Fibre material. The integer label order is fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaterialClass {
    Cotton,
    Polyester,
    Wool,
    Silk,
    Viscose,
}

impl MaterialClass {
    pub const ALL: [MaterialClass; CLASS_COUNT] = [
        MaterialClass::Cotton,
        MaterialClass::Polyester,
        MaterialClass::Wool,
        MaterialClass::Silk,
        MaterialClass::Viscose,
    ];

    pub fn label(self) -> usize {
        self as usize
    }

    pub fn from_label(label: usize) -> Option<Self> {
        Self::ALL.get(label).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            MaterialClass::Cotton => "cotton",
            MaterialClass::Polyester => "polyester",
            MaterialClass::Wool => "wool",
            MaterialClass::Silk => "silk",
            MaterialClass::Viscose => "viscose",
        }
    }
}

impl fmt::Display for MaterialClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
#[error("unknown material `{0}`")]
pub struct UnknownMaterial(pub String);

impl FromStr for MaterialClass {
    type Err = UnknownMaterial;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| UnknownMaterial(s.to_owned()))
    }
}

pub const SPEED_RANGE: (u32, u32) = (1, 5);
pub const CAMERA_RANGE: (u32, u32) = (3, 8);
pub const ERROR_PERCENT_RANGE: (f64, f64) = (0.0, 100.0);
pub const PRIOR_SUM_TOLERANCE: f64 = 1e-9;

/// Probability that a garment carries a given hard component.
pub const DEFAULT_COMPONENT_RATE: f64 = 0.5;

fn uniform_priors() -> Vec<f64> {
    vec![1.0 / CLASS_COUNT as f64; CLASS_COUNT]
}

/// Every knob of the digital twin. Parsing is strict: unknown keys are
/// rejected. `class_priors` may be omitted and then defaults to uniform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub conveyor_speed: u32,
    pub arm_speed: u32,
    pub camera_capture_time: u32,
    pub laser_speed: u32,
    pub error_percent: f64,
    pub garment_count: u32,
    #[serde(default = "uniform_priors")]
    pub class_priors: Vec<f64>,
    pub repetitions: u32,
    pub seed: u64,
}

/// Seed used by the built-in reference scenarios.
pub const REFERENCE_SEED: u64 = 2024;

impl ScenarioConfig {
    /// The digital-twin evaluation setting: belt and arm at 5, camera at 3 s,
    /// laser at 5, 8 % error chance, 10 repetitions.
    pub fn reference(garment_count: u32) -> Self {
        ScenarioConfig {
            conveyor_speed: 5,
            arm_speed: 5,
            camera_capture_time: 3,
            laser_speed: 5,
            error_percent: 8.0,
            garment_count,
            class_priors: uniform_priors(),
            repetitions: 10,
            seed: REFERENCE_SEED,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn error_probability(&self) -> f64 {
        self.error_percent / 100.0
    }
}

/// One offending field of a candidate scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub value: String,
    pub allowed: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: got {}, allowed {}",
            self.field, self.value, self.allowed
        )
    }
}

fn check_int(out: &mut Vec<Violation>, field: &str, value: u32, (lo, hi): (u32, u32)) {
    if !(lo..=hi).contains(&value) {
        out.push(Violation {
            field: field.to_owned(),
            value: value.to_string(),
            allowed: format!("[{lo},{hi}]"),
        });
    }
}

/// Returns the config unchanged when every field is in range, otherwise one
/// violation per offending field.
pub fn validate_scenario(cfg: ScenarioConfig) -> Result<ScenarioConfig, Vec<Violation>> {
    let mut out = Vec::new();
    check_int(&mut out, "conveyor_speed", cfg.conveyor_speed, SPEED_RANGE);
    check_int(&mut out, "arm_speed", cfg.arm_speed, SPEED_RANGE);
    check_int(
        &mut out,
        "camera_capture_time",
        cfg.camera_capture_time,
        CAMERA_RANGE,
    );
    check_int(&mut out, "laser_speed", cfg.laser_speed, SPEED_RANGE);

    let (lo, hi) = ERROR_PERCENT_RANGE;
    if !(cfg.error_percent >= lo && cfg.error_percent <= hi) {
        out.push(Violation {
            field: "error_percent".into(),
            value: cfg.error_percent.to_string(),
            allowed: "[0,100]".into(),
        });
    }
    if let Err(msg) = check_priors(&cfg.class_priors) {
        out.push(Violation {
            field: "class_priors".into(),
            value: format!("{:?}", cfg.class_priors),
            allowed: msg,
        });
    }
    if cfg.repetitions == 0 {
        out.push(Violation {
            field: "repetitions".into(),
            value: "0".into(),
            allowed: ">= 1".into(),
        });
    }

    if out.is_empty() {
        Ok(cfg)
    } else {
        Err(out)
    }
}

fn check_priors(priors: &[f64]) -> Result<(), String> {
    const RULE: &str = "5 non-negative entries summing to 1";
    if priors.len() != CLASS_COUNT || priors.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(RULE.into());
    }
    let sum: f64 = priors.iter().sum();
    if (sum - 1.0).abs() > PRIOR_SUM_TOLERANCE {
        return Err(RULE.into());
    }
    Ok(())
}

/// Hard component that the laser station cuts away.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HardComponent {
    Button,
    Zipper,
}

impl HardComponent {
    pub fn name(self) -> &'static str {
        match self {
            HardComponent::Button => "button",
            HardComponent::Zipper => "zipper",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Garment {
    pub id: u64,
    pub true_class: MaterialClass,
    pub hard_components: Vec<HardComponent>,
    pub cube: Option<Arc<SpectralCube>>,
}

/// Samples a batch of garments with ids `0..count`.
///
/// Panics if `priors` does not hold one weight per class.
pub fn generate_garments(
    count: usize,
    priors: &[f64],
    component_rate: f64,
    rng: &mut RandomStream,
) -> Vec<Garment> {
    assert_eq!(priors.len(), CLASS_COUNT, "one prior per class");
    (0..count)
        .map(|i| {
            let true_class = MaterialClass::ALL[rng.categorical(priors)];
            let mut hard_components = Vec::new();
            if rng.bernoulli(component_rate) {
                hard_components.push(HardComponent::Button);
            }
            if rng.bernoulli(component_rate) {
                hard_components.push(HardComponent::Zipper);
            }
            Garment {
                id: i as u64,
                true_class,
                hard_components,
                cube: None,
            }
        })
        .collect()
}

pub const BAND_COUNT: usize = 151;
pub const FIRST_WAVELENGTH_NM: u32 = 950;
pub const LAST_WAVELENGTH_NM: u32 = 1700;
pub const BAND_STEP_NM: u32 = 5;
pub const DEFAULT_CUBE_SIZE: usize = 8;

const SIGNATURE_CENTERS_NM: [f64; CLASS_COUNT] = [1050.0, 1200.0, 1350.0, 1500.0, 1650.0];
const SIGNATURE_WIDTH_NM: f64 = 60.0;

pub fn wavelengths() -> impl Iterator<Item = u32> {
    (0..BAND_COUNT as u32).map(|i| FIRST_WAVELENGTH_NM + i * BAND_STEP_NM)
}

/// Noise-free reflectance curve of a material: a unit Gaussian bump.
pub fn base_signature(class: MaterialClass) -> Vec<f64> {
    let center = SIGNATURE_CENTERS_NM[class.label()];
    wavelengths()
        .map(|w| {
            let d = (w as f64 - center) / SIGNATURE_WIDTH_NM;
            (-0.5 * d * d).exp()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub wavelength_nm: u32,
    /// Row-major `height * width` grid.
    pub intensities: Vec<f64>,
}

#[derive(Debug, Error, PartialEq)]
pub enum CubeError {
    #[error("expected {BAND_COUNT} bands, got {0}")]
    BandCount(usize),
    #[error("band {index} has wavelength {got} nm, expected {expected} nm")]
    Wavelength {
        index: usize,
        got: u32,
        expected: u32,
    },
    #[error("band {index} holds {got} values, expected {expected}")]
    GridSize {
        index: usize,
        got: usize,
        expected: usize,
    },
    #[error("band {index} holds a negative or non-finite intensity")]
    Intensity { index: usize },
    #[error("cube dimensions must be positive")]
    Empty,
}

/// Hyperspectral image stack on the fixed 950..=1700 nm, 5 nm grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralCube {
    height: usize,
    width: usize,
    bands: Vec<Band>,
}

impl SpectralCube {
    pub fn new(height: usize, width: usize, bands: Vec<Band>) -> Result<Self, CubeError> {
        if height == 0 || width == 0 {
            return Err(CubeError::Empty);
        }
        if bands.len() != BAND_COUNT {
            return Err(CubeError::BandCount(bands.len()));
        }
        for (index, (band, expected)) in bands.iter().zip(wavelengths()).enumerate() {
            if band.wavelength_nm != expected {
                return Err(CubeError::Wavelength {
                    index,
                    got: band.wavelength_nm,
                    expected,
                });
            }
            if band.intensities.len() != height * width {
                return Err(CubeError::GridSize {
                    index,
                    got: band.intensities.len(),
                    expected: height * width,
                });
            }
            if band
                .intensities
                .iter()
                .any(|v| !(v.is_finite() && *v >= 0.0))
            {
                return Err(CubeError::Intensity { index });
            }
        }
        Ok(SpectralCube {
            height,
            width,
            bands,
        })
    }

    /// Cube whose every pixel carries `spectrum`.
    pub fn uniform(height: usize, width: usize, spectrum: &[f64]) -> Result<Self, CubeError> {
        let bands = wavelengths()
            .zip(spectrum)
            .map(|(wavelength_nm, &v)| Band {
                wavelength_nm,
                intensities: vec![v; height * width],
            })
            .collect();
        Self::new(height, width, bands)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> &[Band] {
        &self.bands
    }

    /// Spatial mean of every band.
    pub fn band_means(&self) -> Vec<f64> {
        let n = (self.height * self.width) as f64;
        self.bands
            .iter()
            .map(|b| b.intensities.iter().sum::<f64>() / n)
            .collect()
    }
}

/// Synthetic capture: class signature plus Gaussian pixel noise, clamped at 0.
///
/// Panics on zero `height`/`width` or negative `noise_sigma`.
pub fn synth_spectral_cube(
    class: MaterialClass,
    noise_sigma: f64,
    height: usize,
    width: usize,
    rng: &mut RandomStream,
) -> SpectralCube {
    assert!(noise_sigma >= 0.0, "noise_sigma must be non-negative");
    let signature = base_signature(class);
    let bands = wavelengths()
        .zip(&signature)
        .map(|(wavelength_nm, &base)| Band {
            wavelength_nm,
            intensities: (0..height * width)
                .map(|_| {
                    let noise = if noise_sigma > 0.0 {
                        rng.gaussian(noise_sigma)
                    } else {
                        0.0
                    };
                    (base + noise).max(0.0)
                })
                .collect(),
        })
        .collect();
    SpectralCube::new(height, width, bands).expect("synthetic cube is well formed")
}

pub const ROW_SUM_TOLERANCE: f64 = 1e-9;

/// Metadata of a trained classifier plus the confusion behaviour used to
/// emulate it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierProfile {
    pub name: String,
    pub layer_count: u64,
    pub parameter_count: u64,
    /// Row = true class, column = predicted class.
    pub confusion_probabilities: [[f64; CLASS_COUNT]; CLASS_COUNT],
}

#[derive(Debug, Error, PartialEq)]
pub enum ProfileError {
    #[error("profile name is empty")]
    EmptyName,
    #[error("layer_count and parameter_count must be positive")]
    ZeroSize,
    #[error("confusion row {row} is not a probability vector (sum {sum})")]
    Row { row: usize, sum: f64 },
}

impl ClassifierProfile {
    pub fn validate(&self) -> Result<(), ProfileError> {
        if self.name.trim().is_empty() {
            return Err(ProfileError::EmptyName);
        }
        if self.layer_count == 0 || self.parameter_count == 0 {
            return Err(ProfileError::ZeroSize);
        }
        for (row, probs) in self.confusion_probabilities.iter().enumerate() {
            let sum: f64 = probs.iter().sum();
            let in_range = probs.iter().all(|p| (0.0..=1.0).contains(p));
            if !in_range || (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(ProfileError::Row { row, sum });
            }
        }
        Ok(())
    }

    /// Accuracy implied by the matrix under uniform class priors.
    pub fn mean_diagonal(&self) -> f64 {
        (0..CLASS_COUNT)
            .map(|i| self.confusion_probabilities[i][i])
            .sum::<f64>()
            / CLASS_COUNT as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_stream;

    fn violations(cfg: ScenarioConfig) -> Vec<Violation> {
        validate_scenario(cfg).unwrap_err()
    }

    #[test]
    fn labels_are_fixed() {
        let names: Vec<_> = MaterialClass::ALL
            .iter()
            .map(|c| (c.label(), c.name()))
            .collect();
        assert_eq!(
            names,
            [
                (0, "cotton"),
                (1, "polyester"),
                (2, "wool"),
                (3, "silk"),
                (4, "viscose")
            ]
        );
        for c in MaterialClass::ALL {
            assert_eq!(MaterialClass::from_label(c.label()), Some(c));
            assert_eq!(c.name().parse::<MaterialClass>().unwrap(), c);
        }
        assert_eq!(MaterialClass::from_label(5), None);
        assert!("linen".parse::<MaterialClass>().is_err());
    }

    #[test]
    fn reference_scenario_is_valid() {
        let cfg = ScenarioConfig::reference(10);
        assert_eq!(validate_scenario(cfg.clone()), Ok(cfg));
    }

    #[test]
    fn range_violations_name_the_field() {
        let v = violations(ScenarioConfig {
            conveyor_speed: 0,
            ..ScenarioConfig::reference(10)
        });
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "conveyor_speed");
        assert_eq!(v[0].value, "0");
        assert_eq!(v[0].allowed, "[1,5]");

        let v = violations(ScenarioConfig {
            camera_capture_time: 9,
            ..ScenarioConfig::reference(10)
        });
        assert_eq!(v[0].field, "camera_capture_time");
        assert_eq!(v[0].allowed, "[3,8]");
    }

    #[test]
    fn every_bad_field_reported() {
        let cfg = ScenarioConfig {
            conveyor_speed: 6,
            arm_speed: 0,
            camera_capture_time: 2,
            laser_speed: 9,
            error_percent: 100.5,
            garment_count: 3,
            class_priors: vec![0.5, 0.5, 0.5, 0.0, 0.0],
            repetitions: 0,
            seed: 1,
        };
        let fields: Vec<_> = violations(cfg).into_iter().map(|v| v.field).collect();
        assert_eq!(
            fields,
            [
                "conveyor_speed",
                "arm_speed",
                "camera_capture_time",
                "laser_speed",
                "error_percent",
                "class_priors",
                "repetitions"
            ]
        );
    }

    #[test]
    fn nan_error_percent_rejected() {
        let v = violations(ScenarioConfig {
            error_percent: f64::NAN,
            ..ScenarioConfig::reference(1)
        });
        assert_eq!(v[0].field, "error_percent");
    }

    #[test]
    fn priors_need_five_entries() {
        let v = violations(ScenarioConfig {
            class_priors: vec![0.5, 0.5],
            ..ScenarioConfig::reference(1)
        });
        assert_eq!(v[0].field, "class_priors");
        let v = violations(ScenarioConfig {
            class_priors: vec![-0.1, 0.3, 0.3, 0.3, 0.2],
            ..ScenarioConfig::reference(1)
        });
        assert_eq!(v[0].field, "class_priors");
    }

    #[test]
    fn strict_parsing_rejects_unknown_keys() {
        let mut value = serde_json::to_value(ScenarioConfig::reference(10)).unwrap();
        value["belt"] = 3.into();
        assert!(ScenarioConfig::from_json(&value.to_string()).is_err());
    }

    #[test]
    fn priors_default_to_uniform() {
        let text = r#"{"conveyor_speed":5,"arm_speed":5,"camera_capture_time":3,"laser_speed":5,
            "error_percent":8,"garment_count":10,"repetitions":10,"seed":1}"#;
        let cfg = ScenarioConfig::from_json(text).unwrap();
        assert_eq!(cfg.class_priors, vec![0.2; 5]);
    }

    #[test]
    fn empty_batch() {
        let mut rng = derive_stream(1, "g");
        assert!(generate_garments(0, &uniform_priors(), 0.5, &mut rng).is_empty());
    }

    #[test]
    fn uniform_priors_give_balanced_classes() {
        let mut rng = derive_stream(11, "garments");
        let batch = generate_garments(10_000, &uniform_priors(), DEFAULT_COMPONENT_RATE, &mut rng);
        let mut counts = [0usize; CLASS_COUNT];
        for g in &batch {
            counts[g.true_class.label()] += 1;
        }
        assert_eq!(counts.iter().sum::<usize>(), 10_000);
        for c in counts {
            let freq = c as f64 / 10_000.0;
            assert!((freq - 0.2).abs() <= 0.03, "frequency {freq}");
        }
        let ids: Vec<u64> = batch.iter().map(|g| g.id).collect();
        assert_eq!(ids, (0..10_000).collect::<Vec<_>>());
    }

    #[test]
    fn component_rate_one_attaches_both() {
        let mut rng = derive_stream(1, "g");
        let batch = generate_garments(5, &uniform_priors(), 1.0, &mut rng);
        assert_eq!(batch.len(), 5);
        for g in batch {
            assert_eq!(
                g.hard_components,
                vec![HardComponent::Button, HardComponent::Zipper]
            );
        }
    }

    #[test]
    fn zero_prior_class_never_drawn() {
        let mut rng = derive_stream(5, "g");
        let batch = generate_garments(2000, &[0.0, 0.0, 1.0, 0.0, 0.0], 0.0, &mut rng);
        assert!(batch
            .iter()
            .all(|g| g.true_class == MaterialClass::Wool && g.hard_components.is_empty()));
    }

    #[test]
    fn cube_grid_is_exact() {
        let mut rng = derive_stream(1, "cube");
        let cube = synth_spectral_cube(MaterialClass::Silk, 0.1, 3, 4, &mut rng);
        assert_eq!(cube.bands().len(), 151);
        assert_eq!(cube.bands()[0].wavelength_nm, 950);
        assert_eq!(cube.bands()[150].wavelength_nm, 1700);
        assert!(cube.bands().iter().all(|b| b.intensities.len() == 12));
        assert!(cube
            .bands()
            .iter()
            .flat_map(|b| &b.intensities)
            .all(|v| *v >= 0.0));
    }

    #[test]
    fn noiseless_cubes_repeat() {
        let mut a = derive_stream(1, "a");
        let mut b = derive_stream(2, "b");
        let x = synth_spectral_cube(MaterialClass::Wool, 0.0, 8, 8, &mut a);
        let y = synth_spectral_cube(MaterialClass::Wool, 0.0, 8, 8, &mut b);
        assert_eq!(x, y);
    }

    #[test]
    fn noiseless_classes_are_separated() {
        let mut rng = derive_stream(1, "a");
        let means: Vec<Vec<f64>> = MaterialClass::ALL
            .iter()
            .map(|&c| synth_spectral_cube(c, 0.0, 2, 2, &mut rng).band_means())
            .collect();
        for i in 0..CLASS_COUNT {
            for j in i + 1..CLASS_COUNT {
                let max_gap = means[i]
                    .iter()
                    .zip(&means[j])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                assert!(max_gap > 0.5, "classes {i} and {j} gap {max_gap}");
            }
        }
    }

    #[test]
    fn cube_rejects_bad_grid() {
        let mut bands: Vec<Band> = wavelengths()
            .map(|w| Band {
                wavelength_nm: w,
                intensities: vec![0.0; 4],
            })
            .collect();
        bands[3].wavelength_nm = 966;
        assert_eq!(
            SpectralCube::new(2, 2, bands.clone()),
            Err(CubeError::Wavelength {
                index: 3,
                got: 966,
                expected: 965
            })
        );
        bands[3].wavelength_nm = 965;
        bands[7].intensities[0] = -1.0;
        assert_eq!(
            SpectralCube::new(2, 2, bands.clone()),
            Err(CubeError::Intensity { index: 7 })
        );
        bands.pop();
        assert_eq!(
            SpectralCube::new(2, 2, bands),
            Err(CubeError::BandCount(150))
        );
    }

    #[test]
    fn profile_rows_checked() {
        let mut p = ClassifierProfile {
            name: "id".into(),
            layer_count: 1,
            parameter_count: 1,
            confusion_probabilities: [[0.0; 5]; 5],
        };
        for i in 0..5 {
            p.confusion_probabilities[i][i] = 1.0;
        }
        assert_eq!(p.validate(), Ok(()));
        assert_eq!(p.mean_diagonal(), 1.0);
        p.confusion_probabilities[2][0] = 0.1;
        assert!(matches!(
            p.validate(),
            Err(ProfileError::Row { row: 2, .. })
        ));
    }
}
