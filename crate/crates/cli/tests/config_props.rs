use std::io::Write;

use proptest::prelude::*;
use sparsebyz::sim::RoundMetrics;
use sparsebyz_cli::config::RunConfig;
use sparsebyz_cli::metrics::{MetricsWriter, HEADER};

fn aggregator_lines() -> impl Strategy<Value = Vec<String>> {
    prop_oneof![
        Just(vec!["agg.kind = mean".to_string()]),
        Just(vec!["agg.kind = cm".to_string()]),
        (1usize..6).prop_map(|k| vec!["agg.kind = tm".into(), format!("agg.k_m = {k}")]),
        (0.1f64..5.0, 1usize..4).prop_map(|(t, l)| vec![
            "agg.kind = cc".into(),
            format!("agg.tau = {t}"),
            format!("agg.iters = {l}")
        ]),
        (1usize..20)
            .prop_map(|n| vec!["agg.kind = multikrum".into(), format!("agg.n_select = {n}")]),
        (1usize..300).prop_map(|p| vec![
            "agg.kind = gas".into(),
            format!("agg.p = {p}"),
            "agg.base = cm".into()
        ]),
        Just(vec![
            "agg.kind = rfa".to_string(),
            "agg.tol = 1e-9".to_string()
        ]),
    ]
}

fn attack_lines() -> impl Strategy<Value = Vec<String>> {
    prop_oneof![
        Just(vec![]),
        (0.0f64..3.0).prop_map(|z| vec!["attack.kind = alie".into(), format!("attack.z = {z}")]),
        Just(vec![
            "attack.kind = minsum".to_string(),
            "attack.sign = plus".to_string()
        ]),
        (0.001f64..0.5, 0.0f64..4.0).prop_map(|(d, z2)| vec![
            "attack.kind = hybrid_sparse".into(),
            "mask.method = erk".into(),
            format!("mask.delta = {d}"),
            format!("attack.z2 = {z2}"),
        ]),
        (1usize..30).prop_map(|t| vec![
            "attack.kind = hybrid_sparse".into(),
            "attack.z1_policy = adaptive".into(),
            "mask.method = force".into(),
            format!("mask.steps = {t}"),
            "mask.fc_cap = 0.25".into(),
        ]),
    ]
}

fn config_lines() -> impl Strategy<Value = Vec<String>> {
    (
        any::<u64>(),
        10usize..40,
        0usize..4,
        0.0f64..0.99,
        aggregator_lines(),
        attack_lines(),
        prop::bool::ANY,
    )
        .prop_map(|(seed, k, k_m, beta, agg, atk, dirichlet)| {
            let mut v = vec![
                format!("seed = {seed}"),
                format!("fl.k = {k}"),
                format!("fl.k_m = {k_m}"),
                format!("fl.beta = {beta}"),
            ];
            if dirichlet {
                v.push("data.partition = dirichlet".into());
                v.push("data.alpha = 0.5".into());
            }
            v.extend(agg);
            v.extend(atk);
            v
        })
}

proptest! {
    #[test]
    fn canonical_round_trip(lines in config_lines()) {
        let c = RunConfig::parse(&lines.join("\n")).unwrap();
        let text = c.canonical_text();
        let again = RunConfig::parse(&text).unwrap();
        prop_assert_eq!(&c, &again);
        prop_assert_eq!(text, again.canonical_text());
    }

    #[test]
    fn hash_is_stable_under_reordering(lines in config_lines(), seed in any::<u64>()) {
        let mut shuffled = lines.clone();
        let n = shuffled.len();
        for i in (1..n).rev() {
            shuffled.swap(i, (seed as usize ^ i.wrapping_mul(2654435761)) % (i + 1));
        }
        let a = RunConfig::parse(&lines.join("\n")).unwrap();
        let b = RunConfig::parse(&format!("# reordered\n{}\n", shuffled.join("\n"))).unwrap();
        prop_assert_eq!(a.hash(), b.hash());
    }
}

/// Records the buffer contents at every flush.
#[derive(Default)]
struct Snapshots {
    buf: Vec<u8>,
    flushed: Vec<String>,
}

impl Write for Snapshots {
    fn write(&mut self, b: &[u8]) -> std::io::Result<usize> {
        self.buf.extend_from_slice(b);
        Ok(b.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.flushed
            .push(String::from_utf8(self.buf.clone()).unwrap());
        Ok(())
    }
}

#[test]
fn csv_flushes_whole_rows() {
    let mut w = MetricsWriter::new(Snapshots::default()).unwrap();
    for round in 0..4 {
        let m = RoundMetrics {
            round,
            epoch: round / 2,
            train_loss: Some(1.0 / (round + 1) as f64),
            test_acc: (round % 2 == 1).then_some(0.5),
            escape_cm: None,
            escape_tm: Some(0.25),
            byz_selected_frac: None,
            drift_norm: None,
            angle_deg: None,
            temporal_cos: None,
        };
        w.write(&m).unwrap();
    }
    let snaps = w.into_inner().flushed;
    assert_eq!(snaps.len(), 5);
    for (i, s) in snaps.iter().enumerate() {
        assert!(s.ends_with('\n'));
        assert_eq!(s.lines().count(), i + 1);
        assert_eq!(s.lines().next(), Some(HEADER));
        if i > 0 {
            assert!(s.starts_with(&snaps[i - 1]));
        }
    }
    assert_eq!(snaps[4].lines().nth(2), Some("1,0,0.5,0.5,,0.25,,,,"));
}
