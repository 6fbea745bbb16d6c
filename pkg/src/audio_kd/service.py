"""HTTP description service implementing the textualization wire contract.

``POST /describe`` takes ``{"prompt": str, "audio": [int]}`` and answers
``{"description": str}``. The reference backend is the deterministic mock:
it reads the caption stage out of the rendered prompt, so a remote
``ExternalService`` client pointed here reproduces ``MockDeterministic``.
"""

from __future__ import annotations

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from .pipeline import caption_from_prompt, mock_description


class DescribeRequest(BaseModel):
    prompt: str = Field(min_length=1)
    audio: list[int] = Field(min_length=1)


class DescribeResponse(BaseModel):
    description: str


def create_app(seed: int = 0) -> FastAPI:
    app = FastAPI(title="audio-kd description service")

    @app.get("/health")
    def health():
        return {"status": "ok", "seed": seed}

    @app.post("/describe", response_model=DescribeResponse)
    def describe(req: DescribeRequest):
        caption = caption_from_prompt(req.prompt)
        if not caption:
            raise HTTPException(status_code=422, detail="prompt carries no caption stage")
        return DescribeResponse(description=mock_description(req.audio, caption, seed))

    return app


app = create_app()
