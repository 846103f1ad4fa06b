//! Bundled configuration documents.

const MODELS: &[(&str, &str)] = &[
    ("opt-350m", include_str!("../presets/opt-350m.json")),
    ("opt-1.3b", include_str!("../presets/opt-1.3b.json")),
    ("opt-6.7b", include_str!("../presets/opt-6.7b.json")),
    ("opt-13b", include_str!("../presets/opt-13b.json")),
    ("opt-30b", include_str!("../presets/opt-30b.json")),
];

const HARDWARE: &[(&str, &str)] = &[("hpim-default", include_str!("../presets/hpim-default.json"))];

pub fn model(name: &str) -> Option<&'static str> {
    lookup(MODELS, name)
}

pub fn hardware(name: &str) -> Option<&'static str> {
    lookup(HARDWARE, name)
}

pub fn model_names() -> impl Iterator<Item = &'static str> {
    MODELS.iter().map(|(n, _)| *n)
}

pub fn hardware_names() -> impl Iterator<Item = &'static str> {
    HARDWARE.iter().map(|(n, _)| *n)
}

fn lookup(table: &[(&str, &'static str)], name: &str) -> Option<&'static str> {
    let name = name.to_ascii_lowercase();
    table.iter().find(|(n, _)| *n == name).map(|(_, doc)| *doc)
}
