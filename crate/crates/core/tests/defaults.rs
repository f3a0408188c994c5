//! Published hyper-parameters carried over as defaults.

use dik_core::inversion::FusionParams;
use dik_core::masking::ScheduleParams;
use dik_core::refinement::RefinementParams;

#[test]
fn reverse_steps_and_temperature() {
    assert_eq!(ScheduleParams::default().timesteps, 64);
    assert_eq!(FusionParams::default().temperature, 1.0);
}

#[test]
fn mixing_coefficient() {
    assert_eq!(FusionParams::default().lambda, 0.2);
}

#[test]
fn module_defaults() {
    assert_eq!(ScheduleParams::default().mask_temperature, 0.0);
    assert_eq!(FusionParams::default().lai_margin, 1.0);
    assert_eq!(RefinementParams::default().conf_threshold, 0.5);
}

#[test]
fn config_fields_fall_back_to_defaults() {
    let s: ScheduleParams = serde_json::from_str("{}").unwrap();
    assert_eq!(s, ScheduleParams::default());
    let f: FusionParams = serde_json::from_str(r#"{"lambda":0.4}"#).unwrap();
    assert_eq!((f.lambda, f.temperature, f.lai_margin), (0.4, 1.0, 1.0));
    assert!(serde_json::from_str::<FusionParams>(r#"{"lamda":0.4}"#).is_err());
}
