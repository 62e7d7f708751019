//! Architecture files shipped in `presets/`, embedded at build time.
pub const SNDCGAN_GEN: &str = include_str!("../../../../presets/sndcgan_gen.arch");
pub const SNDCGAN_GEN_SPAP_C2F: &str = include_str!("../../../../presets/sndcgan_gen_spap_c2f.arch");
pub const SNDCGAN_GEN_SPAP_F2C: &str = include_str!("../../../../presets/sndcgan_gen_spap_f2c.arch");
pub const SNDCGAN_DISC: &str = include_str!("../../../../presets/sndcgan_disc.arch");
pub const SNDCGAN_DISC_ATROUS: &str = include_str!("../../../../presets/sndcgan_disc_atrous.arch");
pub const SNDCGAN_DISC_ATROUS_L3: &str = include_str!("../../../../presets/sndcgan_disc_atrous_l3.arch");
pub const PATCHGAN: &str = include_str!("../../../../presets/patchgan.arch");
pub const PATCHGAN_ATROUS: &str = include_str!("../../../../presets/patchgan_atrous.arch");
pub const PATCHGAN_ATROUS_SECOND: &str = include_str!("../../../../presets/patchgan_atrous_second.arch");
pub const CYCLEGAN_GEN: &str = include_str!("../../../../presets/cyclegan_gen.arch");
pub const CYCLEGAN_GEN_SPAP: &str = include_str!("../../../../presets/cyclegan_gen_spap.arch");
pub const DESK_GEN: &str = include_str!("../../../../presets/desk_gen.arch");
pub const DESK_GEN_VANILLA: &str = include_str!("../../../../presets/desk_gen_vanilla.arch");
pub const DESK_DISC: &str = include_str!("../../../../presets/desk_disc.arch");
pub const DESK_CYC_GEN: &str = include_str!("../../../../presets/desk_cyc_gen.arch");
pub const DESK_CYC_DISC: &str = include_str!("../../../../presets/desk_cyc_disc.arch");

/// `(name, text)` of every preset.
pub const ALL: &[(&str, &str)] = &[
    ("sndcgan_gen", SNDCGAN_GEN),
    ("sndcgan_gen_spap_c2f", SNDCGAN_GEN_SPAP_C2F),
    ("sndcgan_gen_spap_f2c", SNDCGAN_GEN_SPAP_F2C),
    ("sndcgan_disc", SNDCGAN_DISC),
    ("sndcgan_disc_atrous", SNDCGAN_DISC_ATROUS),
    ("sndcgan_disc_atrous_l3", SNDCGAN_DISC_ATROUS_L3),
    ("patchgan", PATCHGAN),
    ("patchgan_atrous", PATCHGAN_ATROUS),
    ("patchgan_atrous_second", PATCHGAN_ATROUS_SECOND),
    ("cyclegan_gen", CYCLEGAN_GEN),
    ("cyclegan_gen_spap", CYCLEGAN_GEN_SPAP),
    ("desk_gen", DESK_GEN),
    ("desk_gen_vanilla", DESK_GEN_VANILLA),
    ("desk_disc", DESK_DISC),
    ("desk_cyc_gen", DESK_CYC_GEN),
    ("desk_cyc_disc", DESK_CYC_DISC),
];

pub fn get(name: &str) -> Option<&'static str> {
    ALL.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}
