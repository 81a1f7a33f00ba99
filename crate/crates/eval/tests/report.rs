use prosody_eval::measure::{aggregate, MeasureConfig, MeasuredItem, Observation, SweepReport, REPORT_SCHEMA_VERSION};
use prosody_eval::report::parse_report;
use prosody_eval::sweep::{default_grid, SweepConfig};
use prosody_eval::{render_report, EvalError, ReportFormat};

fn report() -> SweepReport {
    let mut obs = Vec::new();
    for dim in 0..5 {
        for (k, g) in default_grid().into_iter().enumerate() {
            for s in 0..2 {
                obs.push(Observation { dim, target: g, value: 0.8 * g + 0.01 * (k + s + dim) as f64 / 3.0 });
            }
        }
    }
    SweepReport {
        schema_version: REPORT_SCHEMA_VERSION,
        features: aggregate(&[0, 1, 2, 3, 4], &obs),
        sentences: 2,
        utterances: 82,
        failed: 1,
        truncated: 0,
        non_monotonic: 0,
        warnings: vec!["note".into()],
        sweep: SweepConfig::default(),
        measure: MeasureConfig::default(),
        stats_digest: "d1g357".into(),
        items: vec![MeasuredItem {
            job: 0,
            sentence: 1,
            bias: [0.0, 0.25, 0.0, 0.0, 0.0],
            frames: 88,
            truncated: false,
            monotonic: true,
            skipped_phones: 0,
            raw: None,
            measured: None,
            error: Some("no voiced frames".into()),
        }],
    }
}

#[test]
fn json_round_trip() {
    let r = report();
    let json = render_report(&r, ReportFormat::Json).unwrap();
    assert_eq!(parse_report(&json).unwrap(), r);
    assert_eq!(render_report(&r, ReportFormat::Json).unwrap(), json);
}

#[test]
fn csv_has_one_row_per_point() {
    let csv = render_report(&report(), ReportFormat::Csv).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "feature,target_bias,n,mean_measured,std_measured");
    assert_eq!(lines.len(), 1 + 5 * 9);
    assert!(lines[1].starts_with("pitch,-1,2,"));
    assert!(lines.iter().skip(1).all(|l| l.split(',').count() == 5));
}

#[test]
fn svg_has_a_panel_per_feature() {
    let svg = render_report(&report(), ReportFormat::Svg).unwrap();
    assert!(svg.starts_with("<svg"));
    assert!(svg.trim_end().ends_with("</svg>"));
    assert_eq!(svg.matches(r#"class="panel""#).count(), 5);
    for name in ["pitch", "pitch_range", "duration", "energy", "tilt"] {
        assert!(svg.contains(&format!(r#"data-feature="{name}""#)));
    }
    assert!(!svg.contains("href"));
}

#[test]
fn format_names() {
    assert_eq!("json".parse::<ReportFormat>().unwrap(), ReportFormat::Json);
    assert_eq!("CSV".parse::<ReportFormat>().unwrap(), ReportFormat::Csv);
    assert_eq!("svg-plot".parse::<ReportFormat>().unwrap(), ReportFormat::Svg);
    assert!(matches!("pdf".parse::<ReportFormat>(), Err(EvalError::UnknownFormat(f)) if f == "pdf"));
}
