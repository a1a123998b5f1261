//! Fixed 7x5 dot-matrix glyphs for the 36-symbol alphabet (a-z, 0-9).
//!
//! Token ids: alphabet index 0..35, then BOS=36, EOS=37, PAD=38.

pub type TokenId = usize;

pub const ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz0123456789";
pub const ALPHABET_LEN: usize = 36;
pub const BOS: TokenId = 36;
pub const EOS: TokenId = 37;
pub const PAD: TokenId = 38;
pub const VOCAB: usize = 39;

pub const GLYPH_ROWS: usize = 7;
pub const GLYPH_COLS: usize = 5;

#[rustfmt::skip]
const PATTERNS: [[&str; 7]; 36] = [
    // a
    [".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"],
    // b
    ["####.", "#...#", "#...#", "####.", "#...#", "#...#", "####."],
    // c
    [".###.", "#...#", "#....", "#....", "#....", "#...#", ".###."],
    // d
    ["####.", "#...#", "#...#", "#...#", "#...#", "#...#", "####."],
    // e
    ["#####", "#....", "#....", "####.", "#....", "#....", "#####"],
    // f
    ["#####", "#....", "#....", "####.", "#....", "#....", "#...."],
    // g
    [".###.", "#...#", "#....", "#.###", "#...#", "#...#", ".####"],
    // h
    ["#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"],
    // i
    [".###.", "..#..", "..#..", "..#..", "..#..", "..#..", ".###."],
    // j
    ["..###", "...#.", "...#.", "...#.", "...#.", "#..#.", ".##.."],
    // k
    ["#...#", "#..#.", "#.#..", "##...", "#.#..", "#..#.", "#...#"],
    // l
    ["#....", "#....", "#....", "#....", "#....", "#....", "#####"],
    // m
    ["#...#", "##.##", "#.#.#", "#.#.#", "#...#", "#...#", "#...#"],
    // n
    ["#...#", "##..#", "#.#.#", "#..##", "#...#", "#...#", "#...#"],
    // o
    [".###.", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."],
    // p
    ["####.", "#...#", "#...#", "####.", "#....", "#....", "#...."],
    // q
    [".###.", "#...#", "#...#", "#...#", "#.#.#", "#..#.", ".##.#"],
    // r
    ["####.", "#...#", "#...#", "####.", "#.#..", "#..#.", "#...#"],
    // s
    [".####", "#....", "#....", ".###.", "....#", "....#", "####."],
    // t
    ["#####", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."],
    // u
    ["#...#", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."],
    // v
    ["#...#", "#...#", "#...#", "#...#", "#...#", ".#.#.", "..#.."],
    // w
    ["#...#", "#...#", "#...#", "#.#.#", "#.#.#", "##.##", "#...#"],
    // x
    ["#...#", "#...#", ".#.#.", "..#..", ".#.#.", "#...#", "#...#"],
    // y
    ["#...#", "#...#", ".#.#.", "..#..", "..#..", "..#..", "..#.."],
    // z
    ["#####", "....#", "...#.", "..#..", ".#...", "#....", "#####"],
    // 0
    [".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."],
    // 1
    ["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."],
    // 2
    [".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"],
    // 3
    [".###.", "#...#", "....#", "..##.", "....#", "#...#", ".###."],
    // 4
    ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."],
    // 5
    ["#####", "#....", "####.", "....#", "....#", "#...#", ".###."],
    // 6
    ["..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."],
    // 7
    ["#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."],
    // 8
    [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."],
    // 9
    [".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."],
];

/// The ordered character set plus its binary glyph bitmaps.
#[derive(Clone)]
pub struct GlyphFont {
    bitmaps: Vec<[[bool; GLYPH_COLS]; GLYPH_ROWS]>,
}

impl Default for GlyphFont {
    fn default() -> Self {
        let bitmaps = PATTERNS
            .iter()
            .map(|rows| {
                let mut bm = [[false; GLYPH_COLS]; GLYPH_ROWS];
                for (r, row) in rows.iter().enumerate() {
                    debug_assert_eq!(row.len(), GLYPH_COLS);
                    for (c, ch) in row.bytes().enumerate() {
                        bm[r][c] = ch == b'#';
                    }
                }
                bm
            })
            .collect();
        GlyphFont { bitmaps }
    }
}

impl GlyphFont {
    pub fn bitmap(&self, token: TokenId) -> &[[bool; GLYPH_COLS]; GLYPH_ROWS] {
        &self.bitmaps[token]
    }

    pub fn char_of(&self, token: TokenId) -> char {
        match token {
            BOS => '^',
            EOS => '$',
            PAD => '_',
            t => ALPHABET.as_bytes()[t] as char,
        }
    }

    pub fn token_of(&self, ch: char) -> Option<TokenId> {
        ALPHABET.find(ch)
    }

    pub fn text_of(&self, tokens: &[TokenId]) -> String {
        tokens.iter().map(|&t| self.char_of(t)).collect()
    }

    /// Hash over the alphabet string and all bitmap bits; stored in dataset
    /// manifests so readers can detect font drift.
    pub fn alphabet_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(ALPHABET.as_bytes());
        for bm in &self.bitmaps {
            for row in bm {
                for &b in row {
                    h.update([b as u8]);
                }
            }
        }
        crate::checkpoint::hex_string(&h.finalize())
    }
}

/// Token-id mapping emitted alongside checkpoints.
pub fn token_map_json() -> String {
    let mut entries: Vec<String> = ALPHABET
        .chars()
        .enumerate()
        .map(|(i, c)| format!("  \"{c}\": {i}"))
        .collect();
    entries.push(format!("  \"<bos>\": {BOS}"));
    entries.push(format!("  \"<eos>\": {EOS}"));
    entries.push(format!("  \"<pad>\": {PAD}"));
    format!("{{\n{}\n}}\n", entries.join(",\n"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bitmaps_are_pairwise_distinct() {
        let font = GlyphFont::default();
        for a in 0..ALPHABET_LEN {
            for b in a + 1..ALPHABET_LEN {
                assert_ne!(font.bitmap(a), font.bitmap(b), "{} vs {}", font.char_of(a), font.char_of(b));
            }
        }
    }

    #[test]
    fn token_mapping_is_a_bijection() {
        let font = GlyphFont::default();
        for (i, c) in ALPHABET.chars().enumerate() {
            assert_eq!(font.token_of(c), Some(i));
            assert_eq!(font.char_of(i), c);
        }
        assert_eq!(BOS, 36);
        assert_eq!(EOS, 37);
        assert_eq!(PAD, 38);
        assert_eq!(VOCAB, 39);
    }
}
