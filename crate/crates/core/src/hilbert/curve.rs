//! Streaming Hilbert transform (bitwise state machine, one level per step).
//!
//! Each level reads one `dims`-bit digit of the index. The digit's Gray code
//! picks the sub-cube; the entry corner `e` and the principal direction `d`
//! carry the accumulated reflect/rotate transform down to the next level.
//! The starting direction is `dims - 1`, which makes the order-1 tour step
//! along x first.

fn mask(dims: u32) -> u32 {
    (1 << dims) - 1
}

fn rotl(v: u32, r: u32, dims: u32) -> u32 {
    let r = r % dims;
    if r == 0 {
        v & mask(dims)
    } else {
        ((v << r) | (v >> (dims - r))) & mask(dims)
    }
}

fn rotr(v: u32, r: u32, dims: u32) -> u32 {
    rotl(v, dims - r % dims, dims)
}

pub(crate) fn gray(i: u32) -> u32 {
    i ^ (i >> 1)
}

fn gray_inverse(mut g: u32) -> u32 {
    let mut b = 0;
    while g != 0 {
        b ^= g;
        g >>= 1;
    }
    b
}

/// Entry corner of sub-cube `i` along the order-1 curve.
pub(crate) fn entry(i: u32) -> u32 {
    if i == 0 {
        0
    } else {
        gray(2 * ((i - 1) / 2))
    }
}

/// Intra-sub-cube direction of sub-cube `i`.
pub(crate) fn direction(i: u32, dims: u32) -> u32 {
    if i == 0 {
        0
    } else if i.is_multiple_of(2) {
        (i - 1).trailing_ones() % dims
    } else {
        i.trailing_ones() % dims
    }
}

pub(crate) fn start_direction(dims: u32) -> u32 {
    dims - 1
}

pub(crate) fn rotate_left(v: u32, r: u32, dims: u32) -> u32 {
    rotl(v, r, dims)
}

/// Coordinates `[x, y, z]` (z = 0 in 2-D) of Hilbert index `index` on a
/// grid of side `2^order`.
pub fn index_to_coord(dims: u32, order: u32, index: u64) -> [u32; 3] {
    let mut e = 0u32;
    let mut d = start_direction(dims);
    let mut p = [0u32; 3];
    for level in (0..order).rev() {
        let w = ((index >> (level * dims)) & mask(dims) as u64) as u32;
        let l = rotl(gray(w), d + 1, dims) ^ e;
        for (j, pj) in p.iter_mut().enumerate().take(dims as usize) {
            *pj |= ((l >> j) & 1) << level;
        }
        e ^= rotl(entry(w), d + 1, dims);
        d = (d + direction(w, dims) + 1) % dims;
    }
    p
}

/// Inverse of [`index_to_coord`].
pub fn coord_to_index(dims: u32, order: u32, coord: [u32; 3]) -> u64 {
    let mut e = 0u32;
    let mut d = start_direction(dims);
    let mut h = 0u64;
    for level in (0..order).rev() {
        let mut l = 0u32;
        for (j, &c) in coord.iter().enumerate().take(dims as usize) {
            l |= ((c >> level) & 1) << j;
        }
        let w = gray_inverse(rotr(l ^ e, d + 1, dims));
        e ^= rotl(entry(w), d + 1, dims);
        d = (d + direction(w, dims) + 1) % dims;
        h = (h << dims) | w as u64;
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotations_are_inverse() {
        for dims in [2, 3] {
            for v in 0..(1 << dims) {
                for r in 0..4 {
                    assert_eq!(rotr(rotl(v, r, dims), r, dims), v);
                }
            }
        }
        assert_eq!(rotl(0b001, 1, 3), 0b010);
        assert_eq!(rotl(0b100, 1, 3), 0b001);
        assert_eq!(rotl(0b01, 2, 2), 0b01);
    }

    #[test]
    fn streaming_roundtrip_large_order() {
        for dims in [2u32, 3] {
            let order = 12;
            for index in [0u64, 1, 7, 12345, (1 << (dims * order)) - 1] {
                let c = index_to_coord(dims, order, index);
                assert_eq!(coord_to_index(dims, order, c), index);
            }
        }
    }

    #[test]
    fn order_one_starts_along_x() {
        assert_eq!(index_to_coord(2, 1, 1), [1, 0, 0]);
        assert_eq!(index_to_coord(3, 1, 1), [1, 0, 0]);
    }
}
