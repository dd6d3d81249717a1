mod common;

use auglik::data::{read_long_csv, read_wide_csv, write_long_csv, write_wide_csv, ColumnMap, SubjectRecord};
use common::dataset;
use proptest::prelude::*;

const J: usize = 5;

fn subject_strategy() -> impl Strategy<Value = SubjectRecord> {
    (
        prop::collection::vec(prop::option::of(any::<bool>()), J),
        1..=J,
        prop::option::of(any::<bool>()),
        prop::collection::vec(-1e6f64..1e6, 2),
        0.01f64..1e4,
        prop::option::of("[a-z]{1,4}"),
        prop::option::of("[A-Z0-9]{1,4}"),
    )
        .prop_map(|(slots, v, gs, x, w, stratum, cluster)| {
            let (visits, results): (Vec<usize>, Vec<bool>) =
                slots.iter().enumerate().filter_map(|(k, y)| y.map(|y| (k + 1, y))).unzip();
            SubjectRecord {
                id: String::new(),
                aux_results: results,
                aux_visit_indices: visits,
                gs_visit_index: v,
                gs_status: gs,
                covariates: x,
                weight: w,
                stratum,
                cluster,
            }
        })
}

proptest! {
    #[test]
    fn long_and_wide_layouts_round_trip(mut subjects in prop::collection::vec(subject_strategy(), 1..25)) {
        for (i, s) in subjects.iter_mut().enumerate() {
            s.id = format!("id{i}");
        }
        let d = dataset(J, subjects, 0.8, 0.9);
        let dir = tempfile::tempdir().unwrap();
        let long = dir.path().join("long.csv");
        let wide = dir.path().join("wide.csv");
        write_long_csv(&d, &long).unwrap();
        write_wide_csv(&d, &wide).unwrap();
        let map = ColumnMap::default();
        let a = read_long_csv(&long, &map, d.schedule.clone(), d.misclass).unwrap();
        let b = read_wide_csv(&wide, &map, d.schedule.clone(), d.misclass).unwrap();
        prop_assert_eq!(&a, &d);
        prop_assert_eq!(&b, &d);
    }
}

#[test]
fn named_covariate_columns_are_used_in_the_given_order() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    std::fs::write(&path, "id,time_index,result,gs_visit,gs_status,energy,age\na,1,0,2,1,7.5,40\na,2,1,2,1,7.5,40\n")
        .unwrap();
    let map = ColumnMap { covariates: Some(vec!["age".into(), "energy".into()]), ..ColumnMap::default() };
    let d = dataset(2, vec![], 0.8, 0.9);
    let read = read_long_csv(&path, &map, d.schedule, d.misclass).unwrap();
    assert_eq!(read.subjects[0].covariates, vec![40.0, 7.5]);
    assert_eq!(read.subjects[0].aux_visit_indices, vec![1, 2]);
}
