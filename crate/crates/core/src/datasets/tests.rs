use std::collections::HashMap;
use std::io::Write;

use super::*;

fn blob(per_class: usize, seed: u64) -> Dataset {
    synth_generate(&SynthSpec {
        classes: 2,
        dims: 2,
        per_class,
        separation: 4.0,
        seed,
        label_noise: 0.0,
    })
    .unwrap()
}

fn row_key(d: &Dataset, i: usize) -> (Vec<u64>, usize) {
    (d.features().row(i).iter().map(|v| v.to_bits()).collect(), d.labels()[i])
}

fn multiset(d: &Dataset) -> HashMap<(Vec<u64>, usize), usize> {
    let mut m = HashMap::new();
    for i in 0..d.len() {
        *m.entry(row_key(d, i)).or_insert(0) += 1;
    }
    m
}

#[test]
fn csv_three_rows() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.csv");
    std::fs::write(&p, "a,b,label\n1,2,0\n3.5,-4,1\n0,0,1\n").unwrap();
    let d = load_csv(&p, None, 2).unwrap();
    assert_eq!((d.len(), d.classes(), d.dims()), (3, 2, 2));
    assert_eq!(d.labels(), &[0, 1, 1]);
    assert_eq!(d.features().row(1), &[3.5, -4.0]);
}

#[test]
fn csv_named_label_column_is_removed_from_features() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.csv");
    std::fs::write(&p, "y,a,b\n1,2,3\n0,4,5\n").unwrap();
    let d = load_csv(&p, Some("y"), 2).unwrap();
    assert_eq!(d.labels(), &[1, 0]);
    assert_eq!(d.features().data(), &[2.0, 3.0, 4.0, 5.0]);
}

#[test]
fn csv_label_out_of_range_names_row() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.csv");
    std::fs::write(&p, "a,label\n1,0\n2,2\n").unwrap();
    let err = load_csv(&p, None, 2).unwrap_err();
    match err {
        crate::Error::Row { row, .. } => assert_eq!(row, 2),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn csv_non_numeric_and_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.csv");
    let mut f = std::fs::File::create(&p).unwrap();
    writeln!(f, "a,label\n1,0\nxyz,1").unwrap();
    let err = load_csv(&p, None, 2).unwrap_err().to_string();
    assert!(err.contains("row 2") && err.contains("xyz"), "{err}");

    let missing = dir.path().join("nope.csv");
    let err = load_csv(&missing, None, 2).unwrap_err();
    assert!(matches!(err, crate::Error::Io { .. }));
    assert!(err.to_string().contains("nope.csv"));
}

#[test]
fn csv_round_trip_is_bit_exact() {
    let d = blob(20, 3);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("rt.csv");
    write_csv(&p, &d).unwrap();
    let back = load_csv(&p, None, 2).unwrap();
    assert_eq!(d, back);
}

#[test]
fn synth_is_deterministic_with_equidistant_means() {
    let spec = SynthSpec {
        classes: 4,
        dims: 5,
        per_class: 3000,
        separation: 6.0,
        seed: 11,
        label_noise: 0.0,
    };
    let a = synth_generate(&spec).unwrap();
    assert_eq!(a, synth_generate(&spec).unwrap());
    assert_ne!(a, synth_generate(&SynthSpec { seed: 12, ..spec.clone() }).unwrap());

    let means: Vec<Vec<f64>> = (0..4)
        .map(|c| {
            let idx = a.indices_of_class(c);
            (0..5)
                .map(|j| idx.iter().map(|&i| a.features().row(i)[j]).sum::<f64>() / idx.len() as f64)
                .collect()
        })
        .collect();
    for p in 0..4 {
        for q in p + 1..4 {
            let dist: f64 = means[p].iter().zip(&means[q]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            assert!((dist - 6.0).abs() < 0.15, "classes {p},{q}: {dist}");
        }
    }
}

#[test]
fn synth_rejects_too_few_dims() {
    let spec = SynthSpec {
        classes: 4,
        dims: 2,
        per_class: 3,
        separation: 1.0,
        seed: 0,
        label_noise: 0.0,
    };
    assert!(synth_generate(&spec).is_err());
}

#[test]
fn bundle_sizes_for_five_percent_of_hundred() {
    let d = blob(50, 1);
    let test = blob(20, 2);
    let b = make_bundle(&d, &test, UnlearnRequest::sample_level(0.05, 9), 0.2, 0.5).unwrap();
    assert_eq!((b.d_f.len(), b.d_r.len(), b.d_r_alt.len()), (5, 95, 19));
    assert_eq!(b.d_third.len(), 20);
    assert_eq!(b.eval_set().len(), 20);
}

#[test]
fn class_level_bundle_separates_the_class() {
    let d = synth_generate(&SynthSpec {
        classes: 3,
        dims: 3,
        per_class: 10,
        separation: 3.0,
        seed: 5,
        label_noise: 0.0,
    })
    .unwrap();
    let b = make_bundle(&d, &d.clone(), UnlearnRequest::class_level(1, 0), 0.2, 0.5).unwrap();
    assert!(b.d_f.labels().iter().all(|&y| y == 1));
    assert!(b.d_r.labels().iter().all(|&y| y != 1));
    assert_eq!(b.d_f.len(), 10);
    assert_eq!(b.d_test, d);
}

#[test]
fn bundle_errors() {
    let d = blob(5, 1);
    assert!(make_bundle(&d, &d, UnlearnRequest::sample_level(0.01, 0), 0.2, 0.5).is_err());
    assert!(make_bundle(&d, &d, UnlearnRequest::sample_level(0.0, 0), 0.2, 0.5).is_err());
    assert!(make_bundle(&d, &d, UnlearnRequest::class_level(2, 0), 0.2, 0.5).is_err());
    assert!(make_bundle(&d, &d, UnlearnRequest::sample_level(0.2, 0), 0.2, 0.0).is_err());
    let only_zero = d.subset(&d.indices_of_class(0)).unwrap();
    let mixed = only_zero.concat(&d.subset(&[9]).unwrap()).unwrap();
    let absent = mixed.subset(&mixed.indices_of_class(0)).unwrap();
    assert!(make_bundle(&absent, &d, UnlearnRequest::class_level(1, 0), 0.2, 0.5).is_err());
}

#[test]
fn bundle_partition_holds_for_fifty_seeds() {
    let train = blob(60, 21);
    let test = blob(30, 22);
    for seed in 0..50u64 {
        let rate = [0.01, 0.02, 0.05, 0.1][seed as usize % 4];
        let b = make_bundle(&train, &test, UnlearnRequest::sample_level(rate, seed), 0.2, 0.5).unwrap();
        let mut all = b.forget_idx.clone();
        all.extend(&b.retain_idx);
        all.sort_unstable();
        assert_eq!(all, (0..train.len()).collect::<Vec<_>>());
        assert!(b.alt_idx.iter().all(|i| b.retain_idx.binary_search(i).is_ok()));
        assert_eq!(b.d_r_alt.len(), round_half_up(0.2 * b.d_r.len() as f64));

        let mut f_and_r = multiset(&b.d_f);
        for (k, v) in multiset(&b.d_r) {
            *f_and_r.entry(k).or_insert(0) += v;
        }
        assert_eq!(f_and_r, multiset(&train));
        let train_rows = multiset(&train);
        assert!((0..b.d_third.len()).all(|i| !train_rows.contains_key(&row_key(&b.d_third, i))));
    }
}

#[test]
fn bundle_is_deterministic() {
    let train = blob(40, 1);
    let test = blob(20, 2);
    let req = UnlearnRequest::sample_level(0.1, 77);
    let a = make_bundle(&train, &test, req, 0.2, 0.5).unwrap();
    let b = make_bundle(&train, &test, req, 0.2, 0.5).unwrap();
    assert_eq!(a.forget_idx, b.forget_idx);
    assert_eq!(a.alt_idx, b.alt_idx);
    assert_eq!(a.third_idx, b.third_idx);
}

#[test]
fn round_half_up_rounds_halves_up() {
    assert_eq!(round_half_up(2.5), 3);
    assert_eq!(round_half_up(2.49), 2);
    assert_eq!(round_half_up(19.0), 19);
}

#[test]
fn split_and_scale() {
    let d = blob(50, 4);
    let (tr, te) = d.split(0.3, 1).unwrap();
    assert_eq!((tr.len(), te.len()), (70, 30));
    let s = d.min_max_scaled();
    assert!(s.features().data().iter().all(|v| (0.0..=1.0).contains(v)));
}
