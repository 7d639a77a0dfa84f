from prometheus_client import Counter, Gauge, Histogram, start_http_server

from config.settings import settings
from src.utils.logger import get_logger

logger = get_logger(__name__)

# Prometheus metrics
training_iterations = Counter(
    "scene_training_iterations_total", "Optimizer iterations run", ["stage"]
)
densify_operations = Counter(
    "scene_densify_operations_total", "Gaussians affected by density control", ["kind"]
)
edit_count = Counter("scene_edits_total", "Oracle edits requested", ["outcome"])
gaussian_count = Gauge("scene_gaussians", "Current number of Gaussians")
render_duration = Histogram("scene_render_seconds", "Forward rasterization time")
editor_steps = Counter("editor_training_steps_total", "Denoiser optimizer steps", ["phase"])

_server_started = False


def start_metrics_server(port: int = None) -> bool:
    """Expose metrics over HTTP when a port is configured."""
    global _server_started

    port = port or settings.metrics_port
    if port is None or _server_started:
        return False
    try:
        start_http_server(port)
        _server_started = True
        logger.info("Metrics server started", port=port)
        return True
    except OSError as e:
        logger.warning("Metrics server failed to start", port=port, error=str(e))
        return False
