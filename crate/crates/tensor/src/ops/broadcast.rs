//! NumPy-style broadcasting.

/// Maps a flat index of the broadcast output to a flat index of one input.
#[derive(Debug, Clone)]
pub(crate) enum IndexMap {
    Identity,
    /// The input's shape equals a suffix of the output shape.
    Modulo(usize),
    Explicit(Vec<usize>),
}

impl IndexMap {
    #[inline]
    pub(crate) fn get(&self, i: usize) -> usize {
        match self {
            IndexMap::Identity => i,
            IndexMap::Modulo(n) => i % n,
            IndexMap::Explicit(v) => v[i],
        }
    }
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Index map from `out` (a broadcast of `input`) back into `input`.
pub(crate) fn index_map(out: &[usize], input: &[usize]) -> IndexMap {
    let trimmed: &[usize] = {
        let lead = input.iter().take_while(|&&d| d == 1).count();
        &input[lead.min(input.len())..]
    };
    let n_in: usize = input.iter().product();
    let n_out: usize = out.iter().product();
    if n_in == n_out {
        return IndexMap::Identity;
    }
    if trimmed.len() <= out.len() && out[out.len() - trimmed.len()..] == *trimmed {
        return IndexMap::Modulo(n_in.max(1));
    }

    let rank = out.len();
    let offset = rank - input.len();
    let mut in_strides = vec![0usize; rank];
    let mut stride = 1;
    for i in (0..input.len()).rev() {
        in_strides[i + offset] = if input[i] == 1 { 0 } else { stride };
        stride *= input[i];
    }
    let mut idx = Vec::with_capacity(n_out);
    let mut counter = vec![0usize; rank];
    let mut pos = 0usize;
    for _ in 0..n_out {
        idx.push(pos);
        for d in (0..rank).rev() {
            counter[d] += 1;
            pos += in_strides[d];
            if counter[d] < out[d] {
                break;
            }
            pos -= in_strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    IndexMap::Explicit(idx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_broadcast_like_numpy() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[4, 1, 3], &[2, 1]), Some(vec![4, 2, 3]));
        assert_eq!(broadcast_shape(&[2, 3], &[2]), None);
    }

    #[test]
    fn explicit_map_matches_manual_indexing() {
        let out = [2, 3, 2];
        let map = index_map(&out, &[2, 1, 2]);
        let mut expected = Vec::new();
        for i in 0..2 {
            for _j in 0..3 {
                for k in 0..2 {
                    expected.push(i * 2 + k);
                }
            }
        }
        let got: Vec<usize> = (0..12).map(|i| map.get(i)).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn suffix_map_is_modulo() {
        let map = index_map(&[4, 5, 3], &[1, 3]);
        assert!(matches!(map, IndexMap::Modulo(3)));
        assert_eq!(map.get(7), 1);
    }
}
