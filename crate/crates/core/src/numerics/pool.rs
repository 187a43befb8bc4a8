use crate::error::{Error, Result};

/// The `k` largest entries of `row` in descending order with their source
/// indices. Equal values keep index order. When `row` is shorter than `k`
/// the tail is padded with value 0 and position `None`.
pub fn kmax_with_positions(row: &[f64], k: usize) -> Result<(Vec<f64>, Vec<Option<usize>>)> {
    if k == 0 {
        return Err(Error::Config("k-max pooling needs k >= 1".into()));
    }
    let mut values = Vec::with_capacity(k);
    let mut positions = Vec::with_capacity(k);
    kmax_into(row, k, &mut values, &mut positions);
    Ok((values, positions))
}

/// Appends the k-max of `row` to the output buffers. `k` must be positive.
pub(crate) fn kmax_into(
    row: &[f64],
    k: usize,
    values: &mut Vec<f64>,
    positions: &mut Vec<Option<usize>>,
) {
    let start = values.len();
    let mut filled = 0;
    for (idx, &v) in row.iter().enumerate() {
        // Strict comparison: an equal value never displaces an earlier index.
        if filled == k && v <= values[start + k - 1] {
            continue;
        }
        let mut slot = start + filled.min(k - 1);
        if filled < k {
            values.push(v);
            positions.push(Some(idx));
            filled += 1;
        }
        while slot > start && values[slot - 1] < v {
            values[slot] = values[slot - 1];
            positions[slot] = positions[slot - 1];
            slot -= 1;
        }
        values[slot] = v;
        positions[slot] = Some(idx);
    }
    for _ in filled..k {
        values.push(0.0);
        positions.push(None);
    }
}

/// Index of the first maximal element. `values` must be non-empty.
pub(crate) fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sort_oracle(row: &[f64], k: usize) -> (Vec<f64>, Vec<Option<usize>>) {
        let mut idx: Vec<usize> = (0..row.len()).collect();
        // sort_by is stable, so equal values stay in index order.
        idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap());
        let mut values: Vec<f64> = idx.iter().take(k).map(|&i| row[i]).collect();
        let mut positions: Vec<Option<usize>> = idx.iter().take(k).map(|&i| Some(i)).collect();
        values.resize(k, 0.0);
        positions.resize(k, None);
        (values, positions)
    }

    #[test]
    fn ties_prefer_lower_index() {
        let (v, p) = kmax_with_positions(&[0.1, 0.9, 0.5, 0.9], 2).unwrap();
        assert_eq!(v, vec![0.9, 0.9]);
        assert_eq!(p, vec![Some(1), Some(3)]);
    }

    #[test]
    fn short_rows_are_padded() {
        let (v, p) = kmax_with_positions(&[0.7], 3).unwrap();
        assert_eq!(v, vec![0.7, 0.0, 0.0]);
        assert_eq!(p, vec![Some(0), None, None]);
    }

    #[test]
    fn constant_row() {
        let (v, p) = kmax_with_positions(&[0.4; 5], 2).unwrap();
        assert_eq!(v, vec![0.4, 0.4]);
        assert_eq!(p, vec![Some(0), Some(1)]);
    }

    #[test]
    fn zero_k_is_rejected() {
        assert!(kmax_with_positions(&[1.0], 0).is_err());
    }

    #[test]
    fn matches_sort_oracle_on_negative_rows() {
        let row = [-3.0, -1.0, -2.0, -1.0, -5.0];
        for k in 1..=7 {
            assert_eq!(kmax_with_positions(&row, k).unwrap(), sort_oracle(&row, k));
        }
    }

    #[test]
    fn argmax_takes_first() {
        assert_eq!(argmax_first(&[0.2, 0.9, 0.9]), 1);
        assert_eq!(argmax_first(&[-3.0, -1.0, -2.0]), 1);
        assert_eq!(argmax_first(&[4.0]), 0);
    }

    proptest::proptest! {
        #[test]
        fn agrees_with_stable_sort(
            row in proptest::collection::vec(-1.0f64..1.0, 0..64),
            k in 1usize..10,
        ) {
            proptest::prop_assert_eq!(kmax_with_positions(&row, k).unwrap(), sort_oracle(&row, k));
        }
    }
}
