"""
Prometheus metrics for pose solves and weight fitting
Kept on a private registry so that importing the library never touches the global one
"""

from prometheus_client import CollectorRegistry, Counter, Histogram, write_to_textfile

REGISTRY = CollectorRegistry()

SOLVE_COUNT = Counter(
    'stereovo_solves_total', 'Pose solves by outcome', ['outcome'], registry=REGISTRY)
SOLVE_LATENCY = Histogram(
    'stereovo_solve_seconds', 'Wall time of one pose solve', registry=REGISTRY,
    buckets=(0.001, 0.005, 0.01, 0.05, 0.1, 0.25, 0.5, 1.0, 2.5, 5.0))
SOLVE_ITERATIONS = Histogram(
    'stereovo_solve_iterations', 'L-BFGS iterations per solve', registry=REGISTRY,
    buckets=(1, 2, 5, 10, 20, 30, 50, 75, 100, 200))
DEGENERATE_FRAMES = Counter(
    'stereovo_degenerate_frames_total', 'Frame pairs that could not be solved', registry=REGISTRY)
BEHIND_CAMERA = Counter(
    'stereovo_behind_camera_pixels_total', 'Pixels projected behind the camera', registry=REGISTRY)
DDN_INVALID = Counter(
    'stereovo_ddn_invalid_samples_total', 'Samples skipped by implicit differentiation',
    ['reason'], registry=REGISTRY)


def write_metrics(path: str) -> str:
    """Dump the registry in text exposition format"""
    write_to_textfile(path, REGISTRY)
    return path
