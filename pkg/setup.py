from setuptools import setup, find_packages
from pathlib import Path

# Read README file
readme_file = Path(__file__).parent / "README.md"
try:
    long_description = readme_file.read_text(encoding="utf-8") if readme_file.exists() else "curdistill - curriculum dataset distillation"
except Exception:
    long_description = "curdistill - curriculum dataset distillation"

version = "1.0.0"

setup(
    name="curdistill",
    version=version,
    description="Curriculum dataset distillation with teacher-guided synthesis and student feedback",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=find_packages(exclude=["tests", "tests.*", "examples", "examples.*"]),
    classifiers=[
        "Development Status :: 4 - Beta",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
    ],
    python_requires=">=3.9",
    install_requires=[
        "torch>=2.0.0",
        "torchvision>=0.15.0",
        "numpy>=1.24.0",
        "pandas>=1.5.0",
        "pydantic>=2.0.0",
        "requests>=2.31.0",
        "tqdm>=4.65.0",
    ],
    extras_require={
        "dev": [
            "pytest>=7.0.0",
            "black>=23.0.0",
            "flake8>=6.0.0",
            "mypy>=1.0.0",
        ],
        "test": [
            "pytest>=7.0.0",
        ],
    },
    entry_points={
        "console_scripts": [
            "curdistill=curdistill.main:main",
        ],
    },
    include_package_data=True,
    keywords="dataset distillation, curriculum learning, deep learning, PyTorch, CIFAR",
)
