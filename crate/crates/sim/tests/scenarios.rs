use cross_sim::generate::{self, DemandSpec, Profile, RoadClass};
use cross_sim::{NodeKind, Scenario, ScenarioDoc, SimError};

fn no_demand() -> DemandSpec {
    DemandSpec {
        total_rate_vpm: 0.0,
        profile: Profile::Flat,
        seed: 0,
    }
}

fn t_junction_doc() -> ScenarioDoc {
    generate::mixed(1, 1, RoadClass::default(), &no_demand()).unwrap()
}

fn expect_invalid(doc: &ScenarioDoc, needle: &str) {
    match Scenario::from_doc(doc) {
        Err(SimError::Invalid { location, msg }) => {
            let text = format!("{location}: {msg}");
            assert!(text.contains(needle), "unexpected diagnostic: {text}");
        }
        other => panic!("expected a validation error, got {other:?}"),
    }
}

#[test]
fn t_junction_has_six_lanes_each_way_twelve_movements_three_phases() {
    let sc = Scenario::from_doc(&t_junction_doc()).unwrap();
    let it = &sc.network.intersections[0];
    assert_eq!(it.kind, NodeKind::TJunction);
    assert_eq!(it.in_lanes.len(), 6);
    assert_eq!(it.out_lanes.len(), 6);
    assert_eq!(it.movements.len(), 12);
    assert_eq!(it.phases.len(), 3);
}

#[test]
fn four_way_has_twenty_four_movements_and_eight_phases() {
    let doc = generate::grid(1, 1, RoadClass::default(), &no_demand()).unwrap();
    let sc = Scenario::from_doc(&doc).unwrap();
    let it = &sc.network.intersections[0];
    assert_eq!(it.in_lanes.len(), 8);
    assert_eq!(it.movements.len(), 24);
    assert_eq!(it.phases.len(), 8);
    for phase in &it.phases {
        for (i, &a) in phase.iter().enumerate() {
            for &b in &phase[..i] {
                assert!(!sc.network.conflicts(0, a, b));
            }
        }
    }
    // A left turn crosses the opposing through movement.
    let ns_left = &it.phases[2];
    let ns_through = &it.phases[0];
    assert!(ns_left
        .iter()
        .any(|&l| ns_through.iter().any(|&t| sc.network.conflicts(0, l, t))));
}

#[test]
fn empty_network_is_valid() {
    let doc = ScenarioDoc::from_json(r#"{"nodes": [], "links": [], "intersections": []}"#).unwrap();
    let sc = Scenario::from_doc(&doc).unwrap();
    assert!(sc.network.intersections.is_empty());
}

#[test]
fn unknown_movement_in_phase_is_rejected() {
    let mut doc = t_junction_doc();
    doc.intersections[0].phases[1].push(99);
    expect_invalid(&doc, "unknown movement 99");
}

#[test]
fn conflicting_phase_is_rejected() {
    let mut doc = generate::grid(1, 1, RoadClass::default(), &no_demand()).unwrap();
    let it = &mut doc.intersections[0];
    let extra = it.phases[1][0];
    it.phases[0].push(extra);
    expect_invalid(&doc, "conflict");
}

#[test]
fn dangling_lane_is_rejected() {
    let mut doc = t_junction_doc();
    doc.intersections[0].movements[0].in_lane = [0, 7];
    expect_invalid(&doc, "has no lane 7");
    let mut doc = t_junction_doc();
    doc.intersections[0].movements[0].out_lane = [500, 0];
    expect_invalid(&doc, "unknown link 500");
}

#[test]
fn caps_are_enforced() {
    let mut doc = t_junction_doc();
    let p = doc.intersections[0].phases[0].clone();
    for _ in 0..6 {
        doc.intersections[0].phases.push(p.clone());
    }
    expect_invalid(&doc, "exceed the cap of 8");
}

#[test]
fn uncovered_movement_is_rejected() {
    let mut doc = t_junction_doc();
    doc.intersections[0].phases.pop();
    expect_invalid(&doc, "belongs to no phase");
}

#[test]
fn one_by_one_grid_without_demand_has_no_vehicles() {
    let doc = generate::grid(1, 1, RoadClass::default(), &no_demand()).unwrap();
    let sc = Scenario::from_doc(&doc).unwrap();
    assert_eq!(sc.network.intersections.len(), 1);
    assert!(sc.demand.generate(&sc.network).unwrap().is_empty());
}

#[test]
fn five_by_five_total_is_within_three_sigma() {
    let expected = 121.6 * 60.0;
    let sigma = f64::sqrt(expected);
    for (seed, profile) in [(1, Profile::Flat), (2, Profile::Flat), (3, Profile::Peaked)] {
        let spec = DemandSpec {
            total_rate_vpm: 121.6,
            profile,
            seed,
        };
        let sc = Scenario::from_doc(&generate::grid(5, 5, RoadClass::default(), &spec).unwrap()).unwrap();
        assert!((sc.demand.expected_total() - expected).abs() < 1e-6);
        let n = sc.demand.generate(&sc.network).unwrap().len() as f64;
        assert!((n - expected).abs() <= 3.0 * sigma, "seed {seed}: {n} vehicles");
    }
}

#[test]
fn same_seed_gives_identical_vehicles() {
    let spec = DemandSpec {
        total_rate_vpm: 40.0,
        profile: Profile::Peaked,
        seed: 11,
    };
    let sc = Scenario::from_doc(&generate::grid(2, 3, RoadClass::default(), &spec).unwrap()).unwrap();
    let a = sc.demand.generate(&sc.network).unwrap();
    let b = sc.demand.generate(&sc.network).unwrap();
    assert_eq!(a, b);
    let c = sc.demand.with_seed(12).generate(&sc.network).unwrap();
    assert_ne!(a, c);
}

#[test]
fn generated_documents_round_trip_through_json() {
    let spec = DemandSpec {
        total_rate_vpm: 30.0,
        profile: Profile::Flat,
        seed: 5,
    };
    for doc in [
        generate::grid(5, 5, RoadClass::default(), &spec).unwrap(),
        generate::arterial(4, &spec).unwrap(),
        generate::mixed(2, 3, RoadClass::default(), &spec).unwrap(),
    ] {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scenario.json");
        doc.save(&path).unwrap();
        let back = ScenarioDoc::load(&path).unwrap();
        assert_eq!(back, doc);
        Scenario::from_doc(&back).unwrap();
    }
}

#[test]
fn mixed_network_has_both_archetypes() {
    let sc = Scenario::from_doc(&generate::mixed(2, 2, RoadClass::default(), &no_demand()).unwrap()).unwrap();
    let kinds: Vec<_> = sc.network.intersections.iter().map(|i| i.kind).collect();
    assert_eq!(kinds.iter().filter(|k| **k == NodeKind::TJunction).count(), 2);
    assert_eq!(kinds.iter().filter(|k| **k == NodeKind::FourWay).count(), 2);
    let tee = sc.network.topology(0);
    assert_eq!(&tee[..2], &[0.0, 1.0]);
    let four = sc.network.topology(3);
    assert_eq!(&four[..2], &[1.0, 0.0]);
}

#[test]
fn arterial_is_heterogeneous() {
    let sc = Scenario::from_doc(&generate::arterial(3, &no_demand()).unwrap()).unwrap();
    let it = &sc.network.intersections[0];
    // Three-lane main road, single-lane side streets: 2·3·3 + 2·1·3.
    assert_eq!(it.movements.len(), 24);
    assert_eq!(it.in_lanes.len(), 8);
}
