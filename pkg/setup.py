from setuptools import setup, find_namespace_packages

with open('requirements.txt', 'r') as f:
    required_packages = [line.strip() for line in f.readlines() if line.strip() and not line.startswith('-e')]

setup(
    name="kd-lic",
    version="0.1.0",
    description="Knowledge distillation for learned image compression: training, RD evaluation and resource profiling",
    author="nghiauet",
    author_email="nghiauet@local",
    packages=find_namespace_packages(include=["src", "src.*"]),
    package_dir={"": "."},
    python_requires=">=3.9",
    install_requires=required_packages,
    entry_points={
        "console_scripts": [
            "kdlic=src.main:main",
        ],
    },
    extras_require={
        "dev": [
            "pytest",
            "black",
            "flake8",
        ],
    },
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Science/Research",
        "Topic :: Scientific/Engineering :: Image Processing",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
    ],
)
