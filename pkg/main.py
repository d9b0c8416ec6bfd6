from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from contextlib import asynccontextmanager
from model_store import load_model_store, close_model_store, get_model_store
from routes import cam
from logger import logger
import time

API_VERSION = "1.0.0"

@asynccontextmanager
async def lifespan(app: FastAPI):
    """
    Lifespan context manager.

    Startup loads the checkpoint and dataset named in the environment;
    shutdown releases them.
    """
    # Startup
    logger.info("=" * 70)
    logger.info("🚀 Starting Mixup-CAM inference API")
    logger.info("=" * 70)
    await load_model_store()
    logger.info("✅ Application startup complete")
    yield
    # Shutdown
    logger.info("=" * 70)
    logger.info("👋 Shutting down Mixup-CAM inference API...")
    logger.info("=" * 70)
    await close_model_store()
    logger.info("✅ Application shutdown complete")

# Create FastAPI application
app = FastAPI(
    title="Mixup-CAM API",
    description="Class activation maps, pseudo labels and IoU for a trained ClassNet checkpoint",
    version=API_VERSION,
    lifespan=lifespan
)

# ==================== REQUEST LOGGING MIDDLEWARE ====================

@app.middleware("http")
async def log_requests(request: Request, call_next):
    """
    Log method, path, status code and duration of every request.
    """
    start_time = time.time()
    client = request.client.host if request.client else "unknown"
    logger.info(f"➡️  {request.method} {request.url.path} - Client: {client}")

    try:
        response = await call_next(request)
        duration = time.time() - start_time

        if response.status_code < 400:
            status_emoji = "✅"
            log_level = logger.info
        elif response.status_code < 500:
            status_emoji = "⚠️"
            log_level = logger.warning
        else:
            status_emoji = "❌"
            log_level = logger.error

        log_level(
            f"{status_emoji} {request.method} {request.url.path} "
            f"- Status: {response.status_code} - Duration: {duration:.3f}s"
        )
        return response

    except Exception as e:
        duration = time.time() - start_time
        logger.error(
            f"❌ {request.method} {request.url.path} "
            f"- Exception: {str(e)} - Duration: {duration:.3f}s"
        )
        raise

# ==================== HEALTH CHECK ====================

@app.get(
    "/health",
    tags=["Health"],
    summary="Health check",
    description="Check that the API is running and whether a model is loaded"
)
async def health_check():
    logger.debug("Health check endpoint called")
    store = get_model_store()
    return JSONResponse(
        status_code=200,
        content={
            "status": "healthy",
            "message": "Mixup-CAM API is running",
            "version": API_VERSION,
            "model_loaded": bool(store and store.net),
            "dataset_loaded": bool(store and store.dataset),
        }
    )

# ==================== ROOT ENDPOINT ====================

@app.get(
    "/",
    tags=["Root"],
    summary="API information",
    description="Basic information about the API and available endpoints"
)
async def root():
    logger.debug("Root endpoint called")
    return {
        "message": "Welcome to the Mixup-CAM API",
        "version": API_VERSION,
        "documentation": {
            "swagger_ui": "/docs",
            "redoc": "/redoc"
        },
        "health_check": "/health",
        "endpoints": {
            "cam": "/cam",
            "samples": "/samples/{split}/{sample_id}"
        }
    }

# ==================== INCLUDE ROUTERS ====================

app.include_router(cam.router)
logger.info("✅ CAM routes registered")

# ==================== RUN THE APP ====================

if __name__ == "__main__":
    import uvicorn
    uvicorn.run("main:app", host="0.0.0.0", port=8000)
