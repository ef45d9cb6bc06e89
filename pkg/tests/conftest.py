from hypothesis import HealthCheck, settings

# Derandomized so the suite is reproducible run to run; the property tests
# exercise structure, not fresh entropy.
settings.register_profile(
    "repo",
    derandomize=True,
    max_examples=60,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("repo")
