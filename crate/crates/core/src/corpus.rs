//! The listing corpus, embedded so listings can be run by name.

const LISTINGS: &[(&str, &str)] = &[
    ("listing1.asm", include_str!("../corpus/listing1.asm")),
    ("listing2.asm", include_str!("../corpus/listing2.asm")),
    ("listing3.asm", include_str!("../corpus/listing3.asm")),
    ("listing4-taken.asm", include_str!("../corpus/listing4-taken.asm")),
    ("listing4.asm", include_str!("../corpus/listing4.asm")),
    ("listing5.asm", include_str!("../corpus/listing5.asm")),
    ("listing6.asm", include_str!("../corpus/listing6.asm")),
    ("listing7.asm", include_str!("../corpus/listing7.asm")),
    ("listing8.asm", include_str!("../corpus/listing8.asm")),
    ("listing9.asm", include_str!("../corpus/listing9.asm")),
];

/// Source of a corpus listing; the `.asm` suffix is optional.
pub fn listing(name: &str) -> Option<&'static str> {
    let name = name.strip_suffix(".asm").unwrap_or(name);
    LISTINGS.iter().find(|(n, _)| n.strip_suffix(".asm") == Some(name)).map(|(_, src)| *src)
}

pub fn names() -> impl Iterator<Item = &'static str> {
    LISTINGS.iter().map(|(n, _)| *n)
}
