//! Station service laws, error injection and the sorting pipeline.
//!
//! A garment visits conveyor, camera, arm and laser in that order and is then
//! deposited in the bin of its predicted class. Garments are independent jobs
//! processed one after another, so every station aggregate is a plain sum of
//! the service durations charged there and the run total is the sum of the
//! four aggregates.
//!
//! Each station draws at most one error per garment. An error costs one retry
//! of that station's service; the retry itself cannot fail.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classification::Classifier;
use crate::domain::{
    generate_garments, synth_spectral_cube, validate_scenario, Garment, HardComponent,
    MaterialClass, ScenarioConfig, Violation, CLASS_COUNT, DEFAULT_COMPONENT_RATE,
    DEFAULT_CUBE_SIZE,
};
use crate::kernel::{
    run_to_completion, EventKind, EventTrace, KernelError, Payload, SimEvent, Station,
};
use crate::rng::{derive_stream, RandomStream};

pub const CONVEYOR_BASE_TIME: f64 = 5.0;
pub const ARM_BASE_TIME: f64 = 8.0;
pub const LASER_BASE_TIME: f64 = 5.0;
pub const DEFAULT_JITTER: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationParams {
    pub station: Station,
    /// Seconds per item at speed 1.
    pub base_time: f64,
    pub speed: u32,
    pub jitter_fraction: f64,
    pub deterministic: bool,
}

impl StationParams {
    pub fn nominal(&self) -> f64 {
        self.base_time / self.speed as f64
    }
}

/// Service duration for one item. Deterministic stations return the nominal
/// time; stochastic ones scale it by a uniform factor in `1 ± jitter`.
pub fn service_time(params: &StationParams, rng: &mut RandomStream) -> f64 {
    if params.deterministic {
        params.nominal()
    } else {
        let j = params.jitter_fraction;
        params.nominal() * rng.uniform_in(1.0 - j, 1.0 + j)
    }
}

/// `true` with probability `error_percent / 100`.
pub fn inject_error(error_percent: f64, rng: &mut RandomStream) -> bool {
    rng.bernoulli(error_percent / 100.0)
}

/// Timing constants and switches that the scenario file does not carry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineModel {
    pub conveyor_base: f64,
    pub arm_base: f64,
    pub laser_base: f64,
    /// Applied to conveyor and arm; camera and laser are deterministic.
    pub jitter_fraction: f64,
    pub component_rate: f64,
    /// Per-station error switch in pipeline order (conveyor, camera, arm, laser).
    pub errors_enabled: [bool; 4],
    pub cube_noise_sigma: f64,
}

impl Default for PipelineModel {
    fn default() -> Self {
        PipelineModel {
            conveyor_base: CONVEYOR_BASE_TIME,
            arm_base: ARM_BASE_TIME,
            laser_base: LASER_BASE_TIME,
            jitter_fraction: DEFAULT_JITTER,
            component_rate: DEFAULT_COMPONENT_RATE,
            errors_enabled: [true; 4],
            cube_noise_sigma: crate::classification::ORACLE_NOISE_SIGMA,
        }
    }
}

impl PipelineModel {
    pub fn params(&self, station: Station, scenario: &ScenarioConfig) -> StationParams {
        let stochastic = |base, speed| StationParams {
            station,
            base_time: base,
            speed,
            jitter_fraction: self.jitter_fraction,
            deterministic: false,
        };
        match station {
            Station::Conveyor => stochastic(self.conveyor_base, scenario.conveyor_speed),
            Station::Arm => stochastic(self.arm_base, scenario.arm_speed),
            Station::Camera => StationParams {
                station,
                base_time: scenario.camera_capture_time as f64,
                speed: 1,
                jitter_fraction: 0.0,
                deterministic: true,
            },
            Station::Laser => StationParams {
                station,
                base_time: self.laser_base,
                speed: scenario.laser_speed,
                jitter_fraction: 0.0,
                deterministic: true,
            },
            Station::Bin => unreachable!("the bin has no service"),
        }
    }

    fn error_enabled(&self, station: Station) -> bool {
        station_slot(station).is_some_and(|i| self.errors_enabled[i])
    }
}

fn station_slot(station: Station) -> Option<usize> {
    Station::PIPELINE.iter().position(|s| *s == station)
}

/// Error counts per processing station.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StationErrors {
    pub conveyor: u32,
    pub camera: u32,
    pub arm: u32,
    pub laser: u32,
}

impl StationErrors {
    fn bump(&mut self, station: Station) {
        match station {
            Station::Conveyor => self.conveyor += 1,
            Station::Camera => self.camera += 1,
            Station::Arm => self.arm += 1,
            Station::Laser => self.laser += 1,
            Station::Bin => {}
        }
    }

    pub fn total(&self) -> u32 {
        self.conveyor + self.camera + self.arm + self.laser
    }

    fn add(&mut self, other: &StationErrors) {
        self.conveyor += other.conveyor;
        self.camera += other.camera;
        self.arm += other.arm;
        self.laser += other.laser;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GarmentRecord {
    pub garment_id: u64,
    pub true_class: MaterialClass,
    pub predicted_class: MaterialClass,
    pub scores: [f64; CLASS_COUNT],
    pub errors: StationErrors,
    pub components_removed: Vec<HardComponent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionReport {
    pub repetition: u32,
    pub total_time: f64,
    pub conveyor_time: f64,
    pub arm_time: f64,
    pub camera_time: f64,
    pub laser_time: f64,
    pub green_efficiency: f64,
    pub errors: StationErrors,
    pub garments: Vec<GarmentRecord>,
}

/// Arithmetic means over repetitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub total_time: f64,
    pub conveyor_time: f64,
    pub arm_time: f64,
    pub camera_time: f64,
    pub laser_time: f64,
    pub green_efficiency: f64,
    pub classification_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: ScenarioConfig,
    pub profile_name: String,
    pub repetition_reports: Vec<RepetitionReport>,
    pub summary: Summary,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
    #[error("repetition {index} failed: {source}")]
    Repetition {
        index: u32,
        #[source]
        source: KernelError,
    },
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

#[derive(Default)]
struct GarmentState {
    errors: StationErrors,
    failed_first: bool,
    predicted: Option<(MaterialClass, [f64; CLASS_COUNT])>,
    removed: Vec<HardComponent>,
}

#[derive(Default)]
struct Charges {
    services: [u32; 4],
    stochastic_sum: [f64; 4],
}

/// Runs one repetition over `garments`. The stream `rng` is forked into
/// independent `timing`, `errors` and `classifier` substreams.
pub fn process_pipeline(
    scenario: &ScenarioConfig,
    model: &PipelineModel,
    garments: &[Garment],
    classifier: &dyn Classifier,
    rng: &RandomStream,
) -> Result<(RepetitionReport, EventTrace), KernelError> {
    let params: Vec<StationParams> = Station::PIPELINE
        .iter()
        .map(|&s| model.params(s, scenario))
        .collect();
    let mut timing = rng.fork("timing");
    let mut error_rng = rng.fork("errors");
    let mut clf_rng = rng.fork("classifier");

    let mut states: Vec<GarmentState> = garments.iter().map(|_| GarmentState::default()).collect();
    let mut charges = Charges::default();

    let initial = match garments.first() {
        Some(g) => vec![SimEvent::new(
            0.0,
            EventKind::Arrival,
            g.id,
            Station::Conveyor,
            Payload::Empty {},
        )],
        None => vec![],
    };
    let index: HashMap<u64, usize> = garments
        .iter()
        .enumerate()
        .map(|(i, g)| (g.id, i))
        .collect();

    let trace = run_to_completion(initial, |event, sched| {
        let now = sched.now();
        let idx = *index
            .get(&event.garment_id)
            .expect("event for a known garment");
        let garment = &garments[idx];
        let station = event.station;
        let start = |attempt: u32, timing: &mut RandomStream| {
            let slot = station_slot(station).expect("processing station");
            let duration = service_time(&params[slot], timing);
            SimEvent::new(
                now,
                EventKind::ServiceStart,
                garment.id,
                station,
                Payload::Service { attempt, duration },
            )
        };
        match event.kind {
            EventKind::Arrival => {
                sched.schedule(start(1, &mut timing))?;
            }
            EventKind::ServiceStart => {
                let Payload::Service { attempt, duration } = event.payload else {
                    unreachable!("service_start carries its duration")
                };
                if attempt == 1 && model.error_enabled(station) {
                    states[idx].failed_first = inject_error(scenario.error_percent, &mut error_rng);
                } else {
                    states[idx].failed_first = false;
                }
                sched.schedule(SimEvent::new(
                    now + duration,
                    EventKind::ServiceEnd,
                    garment.id,
                    station,
                    event.payload.clone(),
                ))?;
            }
            EventKind::ServiceEnd => {
                let Payload::Service { attempt, duration } = event.payload else {
                    unreachable!("service_end carries its duration")
                };
                let slot = station_slot(station).expect("processing station");
                charges.services[slot] += 1;
                charges.stochastic_sum[slot] += duration;
                if attempt == 1 && states[idx].failed_first {
                    states[idx].errors.bump(station);
                    sched.schedule(SimEvent::new(
                        now,
                        EventKind::ErrorInjected,
                        garment.id,
                        station,
                        Payload::Error { attempt },
                    ))?;
                    return Ok(());
                }
                match station {
                    Station::Camera => {
                        let result = classifier.classify(garment, &mut clf_rng)?;
                        states[idx].predicted = Some((result.predicted, result.scores));
                        sched.schedule(SimEvent::new(
                            now,
                            EventKind::Classified,
                            garment.id,
                            station,
                            Payload::Classified {
                                predicted: result.predicted,
                                scores: result.scores,
                            },
                        ))?;
                    }
                    Station::Laser => {
                        for &component in &garment.hard_components {
                            sched.schedule(SimEvent::new(
                                now,
                                EventKind::ComponentRemoved,
                                garment.id,
                                station,
                                Payload::Component { component },
                            ))?;
                        }
                        let (bin, _) = states[idx].predicted.expect("classified before the laser");
                        sched.schedule(SimEvent::new(
                            now,
                            EventKind::Deposited,
                            garment.id,
                            Station::Bin,
                            Payload::Deposit { bin },
                        ))?;
                    }
                    _ => {
                        sched.schedule(SimEvent::new(
                            now,
                            EventKind::Arrival,
                            garment.id,
                            station.next(),
                            Payload::Empty {},
                        ))?;
                    }
                }
            }
            EventKind::ErrorInjected => {
                sched.schedule(start(2, &mut timing))?;
            }
            EventKind::Classified => {
                sched.schedule(SimEvent::new(
                    now,
                    EventKind::Arrival,
                    garment.id,
                    Station::Arm,
                    Payload::Empty {},
                ))?;
            }
            EventKind::ComponentRemoved => {
                if let Payload::Component { component } = event.payload {
                    states[idx].removed.push(component);
                }
            }
            EventKind::Deposited => {
                if let Some(next) = garments.get(idx + 1) {
                    sched.schedule(SimEvent::new(
                        now,
                        EventKind::Arrival,
                        next.id,
                        Station::Conveyor,
                        Payload::Empty {},
                    ))?;
                }
            }
        }
        Ok(())
    })?;

    let aggregate = |station: Station| {
        let slot = station_slot(station).expect("processing station");
        let p = &params[slot];
        if p.deterministic {
            charges.services[slot] as f64 * p.nominal()
        } else {
            charges.stochastic_sum[slot]
        }
    };
    let conveyor_time = aggregate(Station::Conveyor);
    let camera_time = aggregate(Station::Camera);
    let arm_time = aggregate(Station::Arm);
    let laser_time = aggregate(Station::Laser);

    let mut errors = StationErrors::default();
    let records: Vec<GarmentRecord> = garments
        .iter()
        .zip(states)
        .map(|(g, s)| {
            errors.add(&s.errors);
            let (predicted_class, scores) = s.predicted.expect("every garment is classified");
            GarmentRecord {
                garment_id: g.id,
                true_class: g.true_class,
                predicted_class,
                scores,
                errors: s.errors,
                components_removed: s.removed,
            }
        })
        .collect();
    let green_efficiency = if records.is_empty() {
        1.0
    } else {
        records.iter().filter(|r| r.errors.total() == 0).count() as f64 / records.len() as f64
    };

    let report = RepetitionReport {
        repetition: 0,
        total_time: conveyor_time + arm_time + camera_time + laser_time,
        conveyor_time,
        arm_time,
        camera_time,
        laser_time,
        green_efficiency,
        errors,
        garments: records,
    };
    Ok((report, trace))
}

/// Label of the substream that drives repetition `index`.
pub fn repetition_label(index: u32) -> String {
    format!("rep-{index}")
}

/// Garments for one repetition, with cubes attached when the classifier
/// needs them.
pub fn repetition_garments(
    scenario: &ScenarioConfig,
    model: &PipelineModel,
    classifier: &dyn Classifier,
    rep: &RandomStream,
) -> Vec<Garment> {
    let mut garment_rng = rep.fork("garments");
    let mut garments = generate_garments(
        scenario.garment_count as usize,
        &scenario.class_priors,
        model.component_rate,
        &mut garment_rng,
    );
    if classifier.needs_cube() {
        let mut cube_rng = rep.fork("cubes");
        for g in &mut garments {
            g.cube = Some(Arc::new(synth_spectral_cube(
                g.true_class,
                model.cube_noise_sigma,
                DEFAULT_CUBE_SIZE,
                DEFAULT_CUBE_SIZE,
                &mut cube_rng,
            )));
        }
    }
    garments
}

/// A full run: the report plus one event trace per repetition.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub report: RunReport,
    pub traces: Vec<EventTrace>,
}

/// Validates the scenario and executes every repetition on its own
/// `rep-{i}` substream.
pub fn simulate(
    scenario: &ScenarioConfig,
    model: &PipelineModel,
    classifier: &dyn Classifier,
) -> Result<Simulation, SimError> {
    let scenario = validate_scenario(scenario.clone()).map_err(SimError::Invalid)?;
    let mut reports = Vec::with_capacity(scenario.repetitions as usize);
    let mut traces = Vec::with_capacity(scenario.repetitions as usize);
    for index in 0..scenario.repetitions {
        let rep = derive_stream(scenario.seed, &repetition_label(index));
        let garments = repetition_garments(&scenario, model, classifier, &rep);
        let (mut report, trace) = process_pipeline(&scenario, model, &garments, classifier, &rep)
            .map_err(|source| SimError::Repetition { index, source })?;
        report.repetition = index;
        reports.push(report);
        traces.push(trace);
    }
    let summary = summarize(&reports);
    Ok(Simulation {
        report: RunReport {
            scenario,
            profile_name: classifier.name().to_owned(),
            repetition_reports: reports,
            summary,
        },
        traces,
    })
}

pub fn run_scenario(
    scenario: &ScenarioConfig,
    classifier: &dyn Classifier,
) -> Result<RunReport, SimError> {
    simulate(scenario, &PipelineModel::default(), classifier).map(|s| s.report)
}

fn summarize(reports: &[RepetitionReport]) -> Summary {
    let n = reports.len() as f64;
    let mean = |f: fn(&RepetitionReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let (hits, total) = reports
        .iter()
        .flat_map(|r| &r.garments)
        .fold((0usize, 0usize), |(h, t), g| {
            (h + usize::from(g.true_class == g.predicted_class), t + 1)
        });
    Summary {
        total_time: mean(|r| r.total_time),
        conveyor_time: mean(|r| r.conveyor_time),
        arm_time: mean(|r| r.arm_time),
        camera_time: mean(|r| r.camera_time),
        laser_time: mean(|r| r.laser_time),
        green_efficiency: mean(|r| r.green_efficiency),
        classification_accuracy: (total > 0).then(|| hits as f64 / total as f64),
    }
}

impl RunReport {
    /// Canonical JSON rendering; identical inputs give identical bytes.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Per-garment records of every repetition, in repetition order.
    pub fn garments_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "garment_id",
            "true_class",
            "predicted_class",
            "errors_conveyor",
            "errors_camera",
            "errors_arm",
            "errors_laser",
            "components_removed",
        ])
        .expect("in-memory csv");
        for g in self.repetition_reports.iter().flat_map(|r| &r.garments) {
            w.write_record([
                g.garment_id.to_string(),
                g.true_class.name().to_owned(),
                g.predicted_class.name().to_owned(),
                g.errors.conveyor.to_string(),
                g.errors.camera.to_string(),
                g.errors.arm.to_string(),
                g.errors.laser.to_string(),
                g.components_removed.len().to_string(),
            ])
            .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    /// Rows in the layout of the digital-twin results table, times rendered
    /// to one decimal.
    pub fn summary_rows(&self) -> Vec<(&'static str, String)> {
        let s = &self.summary;
        vec![
            ("Total time", format!("{:.1} s", s.total_time)),
            ("Conveyor belt time", format!("{:.1} s", s.conveyor_time)),
            ("Robotic arm time", format!("{:.1} s", s.arm_time)),
            ("Camera capture time", format!("{:.1} s", s.camera_time)),
            ("Laser segment time", format!("{:.1} s", s.laser_time)),
            (
                "Green production efficiency",
                format!("{:.1}%", s.green_efficiency * 100.0),
            ),
        ]
    }
}
