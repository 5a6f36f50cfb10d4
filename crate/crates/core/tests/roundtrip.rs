use chrono::{Duration, TimeZone, Utc};
use firerisk_core::classify::{jenks_partition, partition_cost};
use firerisk_core::evaluate::{mae, rmse};
use firerisk_core::ingest::{parse_feature_table_reader, EventType, FeatureTable};
use firerisk_core::panel::{Observation, Panel, PeriodKind};
use proptest::prelude::*;

fn panel_strategy() -> impl Strategy<Value = Panel> {
    (1usize..4, 1usize..5, 0usize..3).prop_flat_map(|(nr, np, nf)| {
        let cells = nr * np * 2;
        (
            prop::collection::vec(0u64..1_000_000, cells),
            prop::collection::vec(0.01f64..1e3, cells),
            prop::collection::vec(prop::collection::vec(0.0f64..1e6, nf), nr),
        )
            .prop_map(move |(counts, exposure, x)| {
                let t0 = Utc.with_ymd_and_hms(2015, 3, 1, 7, 0, 0).unwrap();
                let mut obs = Vec::new();
                for r in 0..nr {
                    for p in 0..np {
                        for (k, t) in [EventType::FR, EventType::MD].into_iter().enumerate() {
                            let i = (r * np + p) * 2 + k;
                            obs.push(Observation {
                                region_id: format!("n{r}"),
                                period_start: t0 + Duration::days(p as i64),
                                period_kind: PeriodKind::Daily,
                                exposure: exposure[i],
                                event_type: t,
                                count: counts[i],
                                x: x[r].clone(),
                            });
                        }
                    }
                }
                let names = (0..nf).map(|f| format!("f{f}")).collect();
                Panel::new(names, PeriodKind::Daily, obs).unwrap()
            })
    })
}

proptest! {
    #[test]
    fn panel_csv_round_trip(panel in panel_strategy()) {
        let mut buf = Vec::new();
        panel.write_csv(&mut buf).unwrap();
        let back = Panel::read_csv(buf.as_slice()).unwrap();
        prop_assert_eq!(back, panel);
    }

    #[test]
    fn feature_table_round_trip(values in prop::collection::vec(0.0f64..1e9, 1..40), p in 1usize..4) {
        let n = values.len() / p;
        prop_assume!(n > 0);
        let ids: Vec<String> = (0..n).map(|i| format!("r{i}")).collect();
        let names: Vec<String> = (0..p).map(|f| format!("f{f}")).collect();
        let t = FeatureTable::new(ids, names, values[..n * p].to_vec()).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        prop_assert_eq!(parse_feature_table_reader(buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn metric_bounds(pairs in prop::collection::vec((0.0f64..100.0, 0.0f64..100.0), 1..200)) {
        let (y, yhat): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let (m, r) = (mae(&y, &yhat).unwrap(), rmse(&y, &yhat).unwrap());
        let worst = y.iter().zip(&yhat).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(m <= r * (1.0 + 1e-12));
        prop_assert!(r <= worst * (1.0 + 1e-12));
        prop_assert_eq!(mae(&y, &y).unwrap(), 0.0);
    }

    #[test]
    fn jenks_no_worse_than_any_cut(v in prop::collection::vec(0.0f64..100.0, 4..40), cut in any::<prop::sample::Index>()) {
        let mut x = v.clone();
        x.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let ends = jenks_partition(&v, 2).unwrap();
        let e = 1 + cut.index(x.len() - 1);
        prop_assert!(partition_cost(&x, &ends) <= partition_cost(&x, &[e, x.len()]));
    }
}
