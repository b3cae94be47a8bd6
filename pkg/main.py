from fastapi import FastAPI, HTTPException, Depends, Query, status
from fastapi.middleware.cors import CORSMiddleware
from sqlalchemy.orm import Session
from datetime import datetime
import os
from typing import List, Optional

# Import local modules
from database import get_db
from schemas import (
    HsBoundResponse, PresetSummary, ProblemPreset, RunResponse, RunDetailResponse
)
from services.exceptions import ConfigError
from services.fea_service import Material
from services.homogenization_service import hs_moduli, hs_upper_bound
from services.preset_service import get_preset, list_presets
from services.registry_service import RegistryService

# Initialize FastAPI app
app = FastAPI(
    title="Toponet Design API",
    description="Read-only access to two-scale metamaterial design presets, the Hashin-Shtrikman bound and recorded optimization runs",
    version="1.0.0"
)

# CORS middleware
app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

@app.get("/")
async def root():
    """Root endpoint with API information"""
    return {
        "message": "Toponet Design API",
        "version": "1.0.0",
        "status": "active",
        "endpoints": {
            "hs_bound": "/api/hs-bound",
            "presets": "/api/presets",
            "runs": "/api/runs",
            "docs": "/docs"
        }
    }

@app.get("/api/hs-bound", response_model=HsBoundResponse)
async def hs_bound(
    vf: float = Query(..., description="Solid volume fraction in (0, 1]"),
    E: float = Query(1.0, description="Young's modulus of the solid"),
    nu: float = Query(0.3, description="Poisson's ratio of the solid"),
):
    """Hashin-Shtrikman upper bound on the plane bulk modulus"""
    try:
        material = Material(E, nu)
        bound = hs_upper_bound(vf, material)
    except ValueError as e:
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=str(e))
    k0, g0 = hs_moduli(material)
    return HsBoundResponse(
        volume_fraction=vf, youngs_modulus=E, poisson_ratio=nu,
        bulk_solid=k0, shear_solid=g0, bound=bound
    )

@app.get("/api/presets", response_model=List[PresetSummary])
async def presets():
    """List the built-in problem presets"""
    result = []
    for name in list_presets():
        preset = get_preset(name)
        result.append(PresetSummary(
            name=preset.name, description=preset.description, mode=preset.mode,
            macro_dims=preset.macro_dims, micro_dims=preset.micro_dims
        ))
    return result

@app.get("/api/presets/{name}", response_model=ProblemPreset)
async def preset_detail(name: str):
    """Full preset definition including boundary conditions"""
    try:
        return get_preset(name)
    except ConfigError as e:
        raise HTTPException(status_code=status.HTTP_404_NOT_FOUND, detail=str(e))

@app.get("/api/runs", response_model=List[RunResponse])
async def runs(preset: Optional[str] = None, limit: int = Query(100, ge=1, le=1000),
               db: Session = Depends(get_db)):
    """Recorded runs, newest first"""
    return RegistryService(db).list_runs(preset=preset, limit=limit)

@app.get("/api/runs/{run_id}", response_model=RunDetailResponse)
async def run_detail(run_id: int, db: Session = Depends(get_db)):
    """One recorded run with its epoch log"""
    run = RegistryService(db).get_run(run_id)
    if not run:
        raise HTTPException(status_code=status.HTTP_404_NOT_FOUND, detail="Run not found")
    return run

# Health check endpoint
@app.get("/health")
async def health_check():
    """Health check endpoint"""
    return {
        "status": "healthy",
        "timestamp": datetime.utcnow().isoformat(),
        "version": "1.0.0"
    }

if __name__ == "__main__":
    import uvicorn
    uvicorn.run(
        app,
        host=os.getenv("HOST", "0.0.0.0"),
        port=int(os.getenv("PORT", 8000)),
        reload=os.getenv("DEBUG", "False").lower() == "true"
    )
