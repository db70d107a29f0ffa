import os
from typing import Optional

from flask import current_app

_introspector = None


def get_introspector():
    """Shared Introspector for the API, built on first use from INTROSPECT_CONFIG."""
    global _introspector
    override: Optional[object] = current_app.config.get("INTROSPECTOR")
    if override is not None:
        return override
    if _introspector is None:
        from introspect import DEFAULT_CONFIG, Introspector
        from utils.config import load_config
        _introspector = Introspector(load_config(os.getenv("INTROSPECT_CONFIG", DEFAULT_CONFIG)))
    return _introspector


def register_routes(app):
    from .health import health_bp
    from .features import features_bp
    from .interventions import interventions_bp
    from .reports import reports_bp
    app.register_blueprint(health_bp)
    app.register_blueprint(features_bp)
    app.register_blueprint(interventions_bp)
    app.register_blueprint(reports_bp)
