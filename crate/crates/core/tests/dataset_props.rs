use obsdesign::dataset::{self, ColumnRoles, StudyFrame};
use proptest::prelude::*;

fn roles() -> ColumnRoles {
    ColumnRoles {
        treatment: "T".into(),
        outcome: Some("Y".into()),
        covariates: Vec::new(),
        ignore: Vec::new(),
    }
}

/// Units with both arms present; `NaN` marks a missing cell. The first row of
/// every column is observed.
fn frame_with_gaps() -> impl Strategy<Value = StudyFrame> {
    (2usize..30, 1usize..5).prop_flat_map(|(n, k)| {
        (
            prop::collection::vec(0u8..2, n),
            prop::collection::vec(prop::collection::vec(prop::option::weighted(0.75, -1e3..1e3f64), n), k),
            prop::collection::vec(-50.0..50.0f64, n),
        )
            .prop_map(|(mut t, cols, y)| {
                t[0] = 1;
                t[1] = 0;
                let columns = cols
                    .into_iter()
                    .enumerate()
                    .map(|(j, c)| {
                        let v = c
                            .into_iter()
                            .enumerate()
                            .map(|(i, x)| if i == 0 { x.unwrap_or(1.0) } else { x.unwrap_or(f64::NAN) })
                            .collect();
                        (format!("x{j}"), v)
                    })
                    .collect();
                StudyFrame::new(t, columns, Some(y)).unwrap()
            })
    })
}

fn to_csv(f: &StudyFrame) -> Vec<u8> {
    let mut buf = Vec::new();
    dataset::write_csv(f, "T", "Y", &mut buf).unwrap();
    buf
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn csv_round_trip_is_stable(f in frame_with_gaps()) {
        let text = to_csv(&f);
        let g = dataset::parse_csv(text.as_slice(), &roles()).unwrap();
        prop_assert_eq!(g.n_units(), f.n_units());
        prop_assert_eq!(&g.treatment, &f.treatment);
        prop_assert_eq!(&g.outcome, &f.outcome);
        for (a, b) in f.covariates.columns.iter().zip(&g.covariates.columns) {
            prop_assert_eq!(&a.name, &b.name);
            prop_assert_eq!(&a.missing, &b.missing);
            for i in 0..a.values.len() {
                if !a.missing[i] {
                    prop_assert_eq!(a.values[i].to_bits(), b.values[i].to_bits());
                }
            }
        }
        prop_assert_eq!(to_csv(&g), text);
    }

    #[test]
    fn imputation_is_idempotent(f in frame_with_gaps()) {
        let once = dataset::impute_with_indicators(&f).unwrap();
        prop_assert!(!once.covariates.has_missing());
        let twice = dataset::impute_with_indicators(&once).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn expand_terms_appends_one_column_per_term(
        f in frame_with_gaps(),
        sq_mask in prop::collection::vec(any::<bool>(), 5),
        int_mask in prop::collection::vec(any::<bool>(), 10),
    ) {
        let f = dataset::impute_with_indicators(&f).unwrap();
        let names: Vec<String> = f.covariates.names().into_iter().filter(|n| n.starts_with('x') && !n.contains(':')).collect();
        let squares: Vec<String> = names.iter().zip(&sq_mask).filter(|(_, &m)| m).map(|(n, _)| n.clone()).collect();
        let mut pairs = Vec::new();
        for i in 0..names.len() {
            for j in i + 1..names.len() {
                pairs.push((names[i].clone(), names[j].clone()));
            }
        }
        let interactions: Vec<(String, String)> = pairs.into_iter().zip(&int_mask).filter(|(_, &m)| m).map(|(p, _)| p).collect();
        let g = dataset::expand_terms(&f, &squares, &interactions).unwrap();
        prop_assert_eq!(g.n_units(), f.n_units());
        prop_assert_eq!(g.covariates.n_columns(), f.covariates.n_columns() + squares.len() + interactions.len());
        prop_assert_eq!(dataset::base_columns(&g), dataset::base_columns(&f));
    }
}
