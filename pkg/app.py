# REST API Server for Introspect
from flask import Flask  # type: ignore
from flask_cors import CORS  # type: ignore
import logging
import os
from dotenv import load_dotenv

# Load environment variables from .env.development when running in development
if os.getenv('FLASK_ENV') == 'development' or not os.getenv('FLASK_ENV'):
    env_file = '.env.development' if os.path.exists('.env.development') else '.env'
    if os.path.exists(env_file):
        load_dotenv(env_file)
elif os.path.exists('.env'):
    load_dotenv('.env')

from routes import register_routes

# Configure logging
logging.basicConfig(
    level=logging.INFO, format="%(asctime)s - %(levelname)s - %(message)s"
)
logger = logging.getLogger(__name__)


def create_app(introspector=None):
    """Build the API app; tests pass their own Introspector."""
    app = Flask(__name__)
    app.config['DEBUG'] = os.getenv('FLASK_DEBUG', 'False').lower() in ('true', '1', 'yes')
    app.config['ENV'] = os.getenv('FLASK_ENV', 'production')
    app.config['INTROSPECTOR'] = introspector

    CORS(app, resources={
        r"/api/*": {
            "origins": os.getenv('CORS_ORIGINS', 'http://localhost:3000,http://127.0.0.1:3000').split(','),
            "methods": ["GET", "POST", "OPTIONS"],
            "allow_headers": ["Content-Type"]
        }
    })
    register_routes(app)
    logger.info(f"Flask environment {app.config['ENV']}, debug {app.config['DEBUG']}")
    return app


app = create_app()


if __name__ == "__main__":
    port = int(os.environ.get("PORT", 5000))
    app.run(host="0.0.0.0", port=port, debug=app.config['DEBUG'])
