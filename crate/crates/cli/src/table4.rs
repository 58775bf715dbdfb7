//! Reruns the three reference digital-twin experiments (10, 12 and 14
//! garments; speeds 5/5, camera 3, laser 5; 8% error chance) and checks the
//! simulated averages against the reference table.

use std::path::Path;

use loomline_core::classification::{default_profile, DEFAULT_PROFILE};
use loomline_core::stations::{simulate, PipelineModel, RunReport};
use loomline_core::{ScenarioConfig, StochasticClassifier};
use serde::Serialize;

use crate::CliError;

/// Reference values, for comparison only.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Reference {
    pub garment_count: u32,
    pub total_time: f64,
    pub conveyor_time: f64,
    pub arm_time: f64,
    pub camera_time: f64,
    pub laser_time: f64,
    pub green_efficiency: f64,
}

pub const REFERENCE: [Reference; 3] = [
    Reference {
        garment_count: 10,
        total_time: 80.7,
        conveyor_time: 18.3,
        arm_time: 22.4,
        camera_time: 30.0,
        laser_time: 10.0,
        green_efficiency: 0.75,
    },
    Reference {
        garment_count: 12,
        total_time: 80.3,
        conveyor_time: 12.7,
        arm_time: 19.6,
        camera_time: 36.0,
        laser_time: 12.0,
        green_efficiency: 0.75,
    },
    Reference {
        garment_count: 14,
        total_time: 93.6,
        conveyor_time: 14.8,
        arm_time: 22.8,
        camera_time: 42.0,
        laser_time: 14.0,
        green_efficiency: 0.75,
    },
];

/// Per-garment bands for the stochastic rows.
pub const TOTAL_PER_ITEM: (f64, f64) = (6.5, 10.0);
pub const CONVEYOR_PER_ITEM: (f64, f64) = (0.75, 2.0);
pub const ARM_PER_ITEM: (f64, f64) = (1.2, 2.6);
/// Allowed gap between the model's expected efficiency and the reference one.
pub const EFFICIENCY_GAP: f64 = 0.05;

#[derive(Debug, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub detail: String,
    pub pass: bool,
}

#[derive(Debug, Serialize)]
pub struct Column {
    pub reference: Reference,
    pub summary: loomline_core::stations::Summary,
    /// Camera and laser aggregates with their own retries switched off.
    pub camera_time_no_retry: f64,
    pub laser_time_no_retry: f64,
    pub expected_efficiency: f64,
    pub checks: Vec<Check>,
}

fn within(x: f64, (lo, hi): (f64, f64)) -> bool {
    (lo..=hi).contains(&x)
}

fn run_one(scenario: &ScenarioConfig, model: &PipelineModel) -> Result<RunReport, CliError> {
    let classifier =
        StochasticClassifier::new(default_profile(DEFAULT_PROFILE).expect("built-in profile"));
    simulate(scenario, model, &classifier)
        .map(|s| s.report)
        .map_err(|e| CliError::Invalid(e.to_string()))
}

pub fn column(reference: Reference, reps: u32, seed: u64) -> Result<Column, CliError> {
    let n = reference.garment_count;
    let scenario = ScenarioConfig {
        repetitions: reps,
        seed,
        ..ScenarioConfig::reference(n)
    };
    let report = run_one(&scenario, &PipelineModel::default())?;
    let no_retry = PipelineModel {
        errors_enabled: [true, false, true, false],
        ..PipelineModel::default()
    };
    let exact = run_one(&scenario, &no_retry)?;

    let s = &report.summary;
    let nf = f64::from(n);
    let capture = f64::from(scenario.camera_capture_time);
    let laser_unit = PipelineModel::default().laser_base / f64::from(scenario.laser_speed);
    let reps_ = &report.repetition_reports;
    let p = scenario.error_probability();
    let expected_efficiency = (1.0 - p).powi(4);
    let trials = f64::from(n) * f64::from(reps);
    let sigma = (expected_efficiency * (1.0 - expected_efficiency) / trials.max(1.0)).sqrt();

    let per_item = |x: f64| if n == 0 { 0.0 } else { x / nf };
    let checks = vec![
        Check {
            name: "additivity",
            detail: "total = conveyor + arm + camera + laser in every repetition".into(),
            pass: reps_
                .iter()
                .all(|r| r.total_time - (r.conveyor_time + r.arm_time + r.camera_time + r.laser_time) == 0.0),
        },
        Check {
            name: "total band",
            detail: format!("{:.2} s per garment in {:?}", per_item(s.total_time), TOTAL_PER_ITEM),
            pass: within(per_item(s.total_time), TOTAL_PER_ITEM),
        },
        Check {
            name: "conveyor band",
            detail: format!("{:.2} s per garment in {:?}", per_item(s.conveyor_time), CONVEYOR_PER_ITEM),
            pass: within(per_item(s.conveyor_time), CONVEYOR_PER_ITEM),
        },
        Check {
            name: "arm band",
            detail: format!("{:.2} s per garment in {:?}", per_item(s.arm_time), ARM_PER_ITEM),
            pass: within(per_item(s.arm_time), ARM_PER_ITEM),
        },
        Check {
            name: "camera exact",
            detail: format!(
                "{:.1} s without camera retries vs {:.0} s; (n + camera errors) x {capture} in every repetition",
                exact.summary.camera_time, reference.camera_time
            ),
            pass: exact.summary.camera_time == reference.camera_time
                && reps_.iter().all(|r| r.camera_time == (nf + f64::from(r.errors.camera)) * capture),
        },
        Check {
            name: "laser exact",
            detail: format!(
                "{:.1} s without laser retries vs {:.0} s; (n + laser errors) x {laser_unit} in every repetition",
                exact.summary.laser_time, reference.laser_time
            ),
            pass: exact.summary.laser_time == reference.laser_time
                && reps_.iter().all(|r| r.laser_time == (nf + f64::from(r.errors.laser)) * laser_unit),
        },
        Check {
            name: "efficiency",
            detail: format!(
                "measured {:.1}% vs model {:.1}% (3 sigma = {:.1} points); model vs reference {:.0}% within {:.0} points",
                s.green_efficiency * 100.0,
                expected_efficiency * 100.0,
                3.0 * sigma * 100.0,
                reference.green_efficiency * 100.0,
                EFFICIENCY_GAP * 100.0
            ),
            pass: (s.green_efficiency - expected_efficiency).abs() <= 3.0 * sigma
                && (expected_efficiency - reference.green_efficiency).abs() <= EFFICIENCY_GAP,
        },
    ];
    Ok(Column {
        reference,
        summary: report.summary.clone(),
        camera_time_no_retry: exact.summary.camera_time,
        laser_time_no_retry: exact.summary.laser_time,
        expected_efficiency,
        checks,
    })
}

pub fn run(reps: u32, seed: u64, out: Option<&Path>) -> Result<(), CliError> {
    if reps == 0 {
        return Err(CliError::Invalid("--reps must be at least 1".into()));
    }
    let columns = REFERENCE
        .iter()
        .map(|r| column(*r, reps, seed))
        .collect::<Result<Vec<_>, _>>()?;

    println!("Digital twin results, {reps} repetitions, seed {seed} (simulated / reference)");
    let header: String = columns
        .iter()
        .map(|c| format!("{:>18}", format!("n = {}", c.reference.garment_count)))
        .collect();
    println!("{:<30}{header}", "Number of clothes");
    type Row = (&'static str, fn(&Column) -> (f64, f64));
    let rows: [Row; 7] = [
        ("Total time", |c| {
            (c.summary.total_time, c.reference.total_time)
        }),
        ("Conveyor belt time", |c| {
            (c.summary.conveyor_time, c.reference.conveyor_time)
        }),
        ("Robotic arm time", |c| {
            (c.summary.arm_time, c.reference.arm_time)
        }),
        ("Camera capture time", |c| {
            (c.summary.camera_time, c.reference.camera_time)
        }),
        ("  without camera retries", |c| {
            (c.camera_time_no_retry, c.reference.camera_time)
        }),
        ("Laser segment time", |c| {
            (c.summary.laser_time, c.reference.laser_time)
        }),
        ("  without laser retries", |c| {
            (c.laser_time_no_retry, c.reference.laser_time)
        }),
    ];
    for (label, get) in rows {
        let cells: String = columns
            .iter()
            .map(|c| {
                let (sim, target) = get(c);
                format!("{:>18}", format!("{sim:.1} / {target:.1} s"))
            })
            .collect();
        println!("{label:<30}{cells}");
    }
    let cells: String = columns
        .iter()
        .map(|c| {
            format!(
                "{:>18}",
                format!(
                    "{:.1} / {:.0}%",
                    c.summary.green_efficiency * 100.0,
                    c.reference.green_efficiency * 100.0
                )
            )
        })
        .collect();
    println!("{:<30}{cells}", "Green production efficiency");
    let cells: String = columns
        .iter()
        .map(|c| format!("{:>18}", format!("{:.1}%", c.expected_efficiency * 100.0)))
        .collect();
    println!("{:<30}{cells}", "  model expectation (1-p)^4");

    println!();
    for c in &columns {
        for check in &c.checks {
            let verdict = if check.pass { "PASS" } else { "FAIL" };
            println!(
                "{verdict}  n={:<3} {:<14} {}",
                c.reference.garment_count, check.name, check.detail
            );
        }
    }
    if let Some(path) = out {
        let mut json = serde_json::to_string_pretty(&columns).expect("table serializes");
        json.push('\n');
        crate::write_file(path, &json)?;
    }
    Ok(())
}
