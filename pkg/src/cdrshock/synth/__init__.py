from .town import (
    ROLES,
    Corpus,
    DailyActivity,
    GroundTruth,
    SynthConfig,
    TownLayout,
    build_layout,
    default_calendar,
    expected_p,
    generate_calls,
    generate_corpus,
    generate_population,
    planted_volume_mean,
    read_truth,
    simulate_activity,
    write_cdr_csv,
    write_corpus,
)
from .province import ProvinceConfig, ProvinceSynth, generate_province_panel, province_user_ratios, rsd_population
