mod common;

use std::sync::Arc;

use sgf_core::datagen::stream::{read_stream, write_stream};
use sgf_core::datagen::{replay, DataError};
use sgf_core::fusion::{GraphDocument, W_MAX};
use sgf_core::pipeline::{run_pipeline, PipelineConfig, WorkerMode};
use sgf_core::spn::{Spn, SpnConfig};

#[test]
fn a_generated_room_flows_through_both_worker_modes() {
    let scene = common::rooms(21, 1).remove(0);
    let spn = Arc::new(Spn::new(SpnConfig::tiny(5, 4)).unwrap());
    for mode in [WorkerMode::Sync, WorkerMode::Async] {
        let cfg = PipelineConfig {
            mode,
            ..PipelineConfig::default()
        };
        let out = run_pipeline(&scene.frames, spn.clone(), &cfg).unwrap();
        let map = replay(&scene.frames).unwrap();
        assert_eq!(out.map.len(), map.len());

        let live: Vec<_> = out.graph.topology().nodes().collect();
        assert_eq!(out.fused.nodes.keys().copied().collect::<Vec<_>>(), live);
        for d in out.fused.nodes.values().chain(out.fused.edges.values()) {
            assert!((d.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(d.weight >= 1.0 && d.weight <= W_MAX);
        }
        for &(a, b) in out.fused.edges.keys() {
            assert!(out.graph.topology().has_edge(a, b));
        }

        let partition = out.fused.cluster_instances();
        let covered: usize = partition.instances.values().map(|(m, _)| m.len()).sum();
        assert_eq!(covered, live.len());

        let doc = out.document();
        assert_eq!(GraphDocument::parse(&doc.to_json()).unwrap(), doc);
        assert_eq!(out.report.frames, scene.frames.len());
        assert!(out.report.stages["gnn"].samples > 0);
    }
}

#[test]
fn stream_files_round_trip_and_report_bad_lines() {
    let scene = common::rooms(4, 1).remove(0);
    let mut buf = Vec::new();
    write_stream(&mut buf, &scene.frames).unwrap();
    assert_eq!(read_stream(&buf[..]).unwrap(), scene.frames);

    let mut text = String::from_utf8(buf).unwrap();
    text.push_str("\n{\"frame\": 99, \"additions\": [oops]}\n");
    let lines = text.lines().count();
    match read_stream(text.as_bytes()) {
        Err(DataError::Stream { line, .. }) => assert_eq!(line, lines),
        other => panic!("expected a stream error, got {other:?}"),
    }
}
