use dyad::oracle::{count_paths, ConnectivityTable};
use dyad::Variant;

#[test]
fn table_has_one_row_per_pair() {
    for v in Variant::ALL {
        for (nd, n) in [(1, 4), (2, 3), (4, 8)] {
            let t = count_paths(nd, n, v);
            assert_eq!(t.rows.len(), (nd * n) * (nd * n));
            assert_eq!(t.dense_baseline(), (nd * n) as u64);
        }
    }
}

#[test]
fn single_block_is_dense() {
    for v in Variant::ALL {
        let t = count_paths(1, 4, v);
        assert!(t
            .rows
            .iter()
            .all(|r| r.path_count == r.dense_count && r.same_block));
    }
}

#[test]
fn same_block_pairs_are_better_connected() {
    for v in Variant::ALL {
        let t = count_paths(4, 8, v);
        assert!(t.same_block_mean() > t.cross_block_mean(), "{v}");
        assert!(
            t.rows.iter().all(|r| r.path_count >= 1),
            "{v}: every pair reachable"
        );
        assert!(t.rows.iter().all(|r| r.path_count <= r.dense_count));
    }
}

#[test]
fn csv_round_trip() {
    let t = count_paths(2, 4, Variant::Ot);
    let mut buf = Vec::new();
    t.write_csv(&mut buf).unwrap();
    assert!(String::from_utf8_lossy(&buf).starts_with("i,j,same_block,path_count,dense_count\n"));
    assert_eq!(ConnectivityTable::read_csv(buf.as_slice()).unwrap(), t.rows);
}
