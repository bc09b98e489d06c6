use proptest::prelude::*;
use visiopath_sim::{ScenarioConfig, World};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn car_following_never_creates_overlaps(seed in any::<u64>(), high in any::<bool>()) {
        let mut sc = if high { ScenarioConfig::high_density() } else { ScenarioConfig::medium_density() };
        sc.seed = seed;
        let mut w = World::new(&sc).unwrap();
        for _ in 0..1000 {
            w.spawn_traffic();
            w.advance_traffic(sc.dt);
            let overlaps = w.traffic_overlaps();
            prop_assert!(overlaps.is_empty(), "t={} {:?}", w.time, overlaps);
            let width = w.road.width();
            for v in w.vehicles.values() {
                prop_assert!(v.state.y - 0.5 * v.width >= 0.0 && v.state.y + 0.5 * v.width <= width);
                prop_assert!(v.state.vx >= 0.0);
            }
        }
    }
}
