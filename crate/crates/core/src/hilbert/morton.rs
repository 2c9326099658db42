/// Z-order index: bit `i` of axis `j` lands at bit `i·dims + j`.
pub fn encode(dims: u32, coord: [u32; 3]) -> u64 {
    let mut out = 0u64;
    for bit in 0..(64 / dims) {
        for (j, &c) in coord.iter().enumerate().take(dims as usize) {
            out |= (((c >> bit) & 1) as u64) << (bit * dims + j as u32);
        }
    }
    out
}

pub fn decode(dims: u32, index: u64) -> [u32; 3] {
    let mut c = [0u32; 3];
    for bit in 0..(64 / dims).min(32) {
        for (j, cj) in c.iter_mut().enumerate().take(dims as usize) {
            *cj |= (((index >> (bit * dims + j as u32)) & 1) as u32) << bit;
        }
    }
    c
}
